"""Reference computations used to check the ensemble machinery.

Mean-field moments and derivatives by trapezoidal quadrature, central finite
differences, Gaussian KDE and the analytic posteriors of the experiments.
Nothing here reuses the ensemble moment code, so agreement is meaningful.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.signal import argrelmax

from .kernels import KernelKind, KernelSpec, WeightVector
from .local_approx import LocalBilinear, LocalJacobian
from .moments import LocalMoments, format_csv


class ResolutionError(ValueError):
    pass


def _trapezoid_weights(n: int, spacing: float) -> np.ndarray:
    w = np.full(n, spacing)
    w[0] = w[-1] = 0.5 * spacing
    return w


@dataclass(frozen=True)
class QuadratureMeasure:
    """Density on a 1d interval or 2d box, discretised on a tensor trapezoid grid.

    ``nodes`` has shape (N, dim) and ``mass`` holds the normalised quadrature
    weight times density at each node (it sums to one).
    """

    nodes: np.ndarray
    mass: np.ndarray
    spacing: float
    box: tuple

    @classmethod
    def build(cls, density: Callable[[np.ndarray], np.ndarray], box, n_nodes: int | None = None):
        box = np.atleast_2d(np.asarray(box, dtype=float))
        dim = box.shape[0]
        if dim not in (1, 2):
            raise ValueError("quadrature oracle supports 1d and 2d measures only")
        if n_nodes is None:
            n_nodes = 2001 if dim == 1 else 301
        axes = [np.linspace(lo, hi, n_nodes) for lo, hi in box]
        steps = [(hi - lo) / (n_nodes - 1) for lo, hi in box]
        mesh = np.meshgrid(*axes, indexing="ij")
        nodes = np.stack([m.ravel() for m in mesh], axis=1)
        w = _trapezoid_weights(n_nodes, steps[0])
        if dim == 2:
            w = np.outer(w, _trapezoid_weights(n_nodes, steps[1])).ravel()
        mass = w * np.asarray(density(nodes), dtype=float).reshape(-1)
        total = mass.sum()
        if not total > 0:
            raise ValueError("density integrates to zero on the box")
        return cls(nodes, mass / total, max(steps), tuple(map(tuple, box)))

    @classmethod
    def uniform(cls, box, n_nodes: int | None = None):
        return cls.build(lambda z: np.ones(len(z)), box, n_nodes)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]


def _node_weights(kernel: KernelSpec, measure: QuadratureMeasure, x) -> np.ndarray:
    if kernel.kind is not KernelKind.FLAT and kernel.bandwidth < 5 * measure.spacing:
        raise ResolutionError(
            f"bandwidth {kernel.bandwidth} is below 5 grid spacings ({measure.spacing:.3g})"
        )
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d2 = np.sum((measure.nodes - x) ** 2, axis=1)
    if kernel.kind is KernelKind.FLAT:
        k = np.ones_like(d2)
    else:
        logk = -d2 / (2 * kernel.bandwidth**2)
        k = np.exp(logk - logk.max())
        if kernel.kind is KernelKind.TRUNCATED_GAUSSIAN:
            k[d2 > kernel.radius**2] = 0.0
    w = k * measure.mass
    return w / w.sum()


def _evaluate(A: Callable, nodes: np.ndarray) -> np.ndarray:
    return np.asarray(A(nodes), dtype=float).reshape(len(nodes), -1)


def _local_nodes(kernel: KernelSpec, measure: QuadratureMeasure, x, cutoff: float = 1e-18):
    """Nodes with weight above ``cutoff * max`` and their renormalised weights."""
    w = _node_weights(kernel, measure, x)
    keep = w > cutoff * w.max()
    return measure.nodes[keep], w[keep] / w[keep].sum()


def _moments(Z: np.ndarray, w: np.ndarray, FA: np.ndarray):
    mu = w @ Z
    mu_A = w @ FA
    dZ = Z - mu
    C_uu = (dZ * w[:, None]).T @ dZ
    C_uA = (dZ * w[:, None]).T @ (FA - mu_A)
    return mu, mu_A, C_uu, C_uA


def mf_local_moments(kernel: KernelSpec, measure: QuadratureMeasure, A: Callable, x) -> LocalMoments:
    """Mean-field weighted moments ``integral kappa(x, z) (...) dnu(z)`` by quadrature.

    The returned weights live on the quadrature nodes that carry weight.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    Z, w = _local_nodes(kernel, measure, x)
    mu, mu_A, C_uu, C_uA = _moments(Z, w, _evaluate(A, Z))
    return LocalMoments(x, mu, mu_A, C_uu, C_uA, WeightVector(w, x))


def mf_d_kappa(kernel: KernelSpec, measure: QuadratureMeasure, A: Callable, x) -> LocalJacobian:
    lm = mf_local_moments(kernel, measure, A, x)
    return LocalJacobian(lm.anchor, np.linalg.solve(lm.C_uu, lm.C_uA).T)


def mf_d2_kappa(kernel: KernelSpec, measure: QuadratureMeasure, A: Callable, x,
                cutoff: float = 1e-12) -> LocalBilinear:
    """Symmetrised mean-field second derivative.

    The mean-field first derivative is evaluated at every node whose weight
    exceeds ``cutoff`` (relative), and its deviation from the value at the
    local mean is regressed on position exactly as A is for the first
    derivative.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    Z, w = _local_nodes(kernel, measure, x, cutoff)
    lm = mf_local_moments(kernel, measure, A, x)
    Cinv = np.linalg.inv(lm.C_uu)
    D_mu = mf_d_kappa(kernel, measure, A, lm.mu).matrix
    delta = np.stack([mf_d_kappa(kernel, measure, A, z).matrix for z in Z]) - D_mu
    dual = (Z - lm.mu) @ Cinv
    # M1[k, f, g] = sum_i w_i dual_i[f] Delta_i[k, g]  (projector is I for invertible C)
    m1 = np.einsum("i,il,ikm->klm", w, dual, delta)
    return LocalBilinear(lm.anchor, 0.5 * (m1 + np.swapaxes(m1, 1, 2)))


def statistical_linearization(measure: QuadratureMeasure, A: Callable) -> np.ndarray:
    """Unweighted regression slope ``C_Au C_uu^-1`` of A under the measure."""
    FA = _evaluate(A, measure.nodes)
    w = measure.mass
    dZ = measure.nodes - w @ measure.nodes
    dF = FA - w @ FA
    C_uu = (dZ * w[:, None]).T @ dZ
    C_uA = (dZ * w[:, None]).T @ dF
    return np.linalg.solve(C_uu, C_uA).T


def fd_jacobian(A: Callable, x, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian (d, p) of a batched map."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    E = np.eye(len(x)) * step
    plus = _evaluate(A, x + E)
    minus = _evaluate(A, x - E)
    return ((plus - minus) / (2 * step)).T


def fd_hessian(A: Callable, x, step: float = 1e-4) -> np.ndarray:
    """Central-difference second derivative tensor (d, p, p)."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    p = len(x)
    E = np.eye(p) * step
    H = None
    for l in range(p):
        for m in range(p):
            pts = np.stack([x + E[l] + E[m], x + E[l] - E[m], x - E[l] + E[m], x - E[l] - E[m]])
            v = _evaluate(A, pts)
            val = (v[0] - v[1] - v[2] + v[3]) / (4 * step**2)
            if H is None:
                H = np.zeros((len(val), p, p))
            H[:, l, m] = val
    return H


@dataclass(frozen=True)
class DensityCurve:
    grid: np.ndarray
    values: np.ndarray
    normalized: bool = True

    def integral(self) -> float:
        return float(np.trapezoid(self.values, self.grid))

    def modes(self, min_rel_height: float = 0.0) -> np.ndarray:
        """Grid locations of strict local maxima at least ``min_rel_height * max``."""
        idx = argrelmax(self.values)[0]
        idx = idx[self.values[idx] >= min_rel_height * self.values.max()]
        return self.grid[idx]

    @property
    def mode(self) -> float:
        return float(self.grid[np.argmax(self.values)])

    def l1_distance(self, other: "DensityCurve") -> float:
        if not np.array_equal(self.grid, other.grid):
            raise ValueError("curves live on different grids")
        return float(np.trapezoid(np.abs(self.values - other.values), self.grid))

    def to_csv(self, path) -> None:
        table = np.column_stack([self.grid, self.values])
        Path(path).write_text(format_csv(["grid", "value"], table), newline="\n")


def _normalize(grid: np.ndarray, values: np.ndarray) -> DensityCurve:
    total = np.trapezoid(values, grid)
    return DensityCurve(grid, values / total, True)


def silverman_bandwidth(samples) -> float:
    samples = np.asarray(samples, dtype=float)
    return 1.06 * samples.std(ddof=1) * len(samples) ** (-0.2)


def kde(samples, grid, bandwidth: float | None = None, chunk: int = 256) -> DensityCurve:
    """Gaussian kernel density estimate on ``grid``, normalised by trapezoid rule."""
    samples = np.asarray(samples, dtype=float).ravel()
    grid = np.asarray(grid, dtype=float)
    if len(samples) < 2:
        raise ValueError("kde needs at least 2 samples")
    if bandwidth is None:
        bandwidth = silverman_bandwidth(samples)
    if not bandwidth > 0:
        warnings.warn("samples have zero spread; returning a spike at their value", RuntimeWarning)
        bandwidth = 2.0 * float(np.min(np.diff(grid))) if len(grid) > 1 else 1.0
    values = np.empty(len(grid))
    for start in range(0, len(grid), chunk):
        z = (grid[start:start + chunk, None] - samples[None, :]) / bandwidth
        values[start:start + chunk] = np.exp(-0.5 * z * z).sum(axis=1)
    values /= len(samples) * bandwidth * np.sqrt(2 * np.pi)
    return _normalize(grid, values)


def posterior_1d_bimodal(grid, y: float = 1.0, noise_var: float = 1.0) -> DensityCurve:
    """Posterior of ``A(x) = x + 0.75 x^2`` under a N(0, 1) prior and N(0, noise_var) noise."""
    grid = np.asarray(grid, dtype=float)
    resid = y - grid - 0.75 * grid**2
    logp = -0.5 * grid**2 - 0.5 * resid**2 / noise_var
    return _normalize(grid, np.exp(logp - logp.max()))


def posterior_shell_pushforward(grid, sigma: float = 2.0, n: int = 10, y: float = 45.0) -> DensityCurve:
    """Density of ``|u|`` under the posterior ``N(0, sigma^2 I_n)`` prior, data ``y = |u|^2 + N(0, 1)``."""
    grid = np.asarray(grid, dtype=float)
    if n < 1 or sigma <= 0:
        raise ValueError("need n >= 1 and sigma > 0")
    if np.any(grid <= 0):
        raise ValueError("grid must lie in (0, inf)")
    logp = (n - 1) * np.log(grid) - grid**2 / (2 * sigma**2) - 0.5 * (y - grid**2) ** 2
    return _normalize(grid, np.exp(logp - logp.max()))
