"""Ensembles, empirical moments (global and locally weighted) and finite frames."""
from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .kernels import KernelSpec, WeightVector, weight_matrix

DEFAULT_REL_TOL = 1e-10


@dataclass(frozen=True)
class Ensemble:
    """J particles in R^p, optionally with their forward evaluations in R^d.

    Instances are immutable; :meth:`evaluate` is the only way to attach
    features, so the cache always matches the map it was built from.
    """

    particles: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self):
        particles = np.array(self.particles, dtype=float)
        if particles.ndim == 1:
            particles = particles[:, None]
        if particles.ndim != 2:
            raise ValueError("particles must be a (J, p) array")
        if len(particles) < 2:
            raise ValueError(f"an ensemble needs at least 2 particles, got {len(particles)}")
        particles.setflags(write=False)
        object.__setattr__(self, "particles", particles)
        if self.features is not None:
            features = np.array(self.features, dtype=float)
            if features.ndim == 1:
                features = features[:, None]
            if features.shape[0] != particles.shape[0]:
                raise ValueError("features must have one row per particle")
            features.setflags(write=False)
            object.__setattr__(self, "features", features)

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    @property
    def feature_dim(self) -> int:
        return self.require_features().shape[1]

    def evaluate(self, forward: Callable[[np.ndarray], np.ndarray]) -> "Ensemble":
        """Return a copy with ``features = forward(particles)`` (batched map)."""
        features = np.asarray(forward(self.particles), dtype=float)
        if features.ndim == 1:
            features = features[:, None]
        return Ensemble(self.particles, features)

    def require_features(self) -> np.ndarray:
        if self.features is None:
            raise ValueError("ensemble has no cached forward evaluations; call evaluate() first")
        return self.features

    def to_csv(self, path) -> None:
        write_ensemble_csv(self, path)

    @classmethod
    def from_csv(cls, path) -> "Ensemble":
        return read_ensemble_csv(path)


def format_csv(header: list[str], rows: np.ndarray) -> str:
    """Render a numeric table as CSV with a header row and LF line endings.

    ``%.17g`` round-trips float64 exactly, which keeps reruns byte-identical.
    """
    buf = io.StringIO()
    np.savetxt(buf, np.atleast_2d(rows), fmt="%.17g", delimiter=",", header=",".join(header),
               comments="", newline="\n")
    return buf.getvalue()


def write_ensemble_csv(ensemble: Ensemble, path) -> None:
    header = [f"u_{k + 1}" for k in range(ensemble.dim)]
    table = ensemble.particles
    if ensemble.features is not None:
        header += [f"A_{k + 1}" for k in range(ensemble.features.shape[1])]
        table = np.hstack([ensemble.particles, ensemble.features])
    Path(path).write_text(format_csv(header, table), newline="\n")


def read_ensemble_csv(path) -> Ensemble:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    u_cols = [i for i, name in enumerate(header) if name.startswith("u_")]
    a_cols = [i for i, name in enumerate(header) if name.startswith("A_")]
    if not u_cols or len(u_cols) + len(a_cols) != len(header):
        raise ValueError(f"unrecognised ensemble header: {header}")
    features = table[:, a_cols] if a_cols else None
    return Ensemble(table[:, u_cols], features)


@dataclass(frozen=True)
class GlobalMoments:
    mean: np.ndarray
    feature_mean: np.ndarray
    C_uu: np.ndarray
    C_uA: np.ndarray


def global_moments(ensemble: Ensemble) -> GlobalMoments:
    """Empirical means and (J-1)-normalised covariances of the whole ensemble."""
    U = ensemble.particles
    F = ensemble.require_features()
    J = len(U)
    mean = U.mean(axis=0)
    feature_mean = F.mean(axis=0)
    dU = U - mean
    dF = F - feature_mean
    C_uu = dU.T @ dU / (J - 1)
    C_uu = 0.5 * (C_uu + C_uu.T)
    return GlobalMoments(mean, feature_mean, C_uu, dU.T @ dF / (J - 1))


@dataclass(frozen=True)
class LocalMoments:
    """Locally weighted moments as seen from ``anchor``.

    Weighted sums use the simplex weights directly (no Bessel correction), so
    with the flat kernel ``C_uu`` equals ``(J-1)/J`` times the global one.
    """

    anchor: np.ndarray
    mu: np.ndarray
    mu_A: np.ndarray | None
    C_uu: np.ndarray
    C_uA: np.ndarray | None
    weights: WeightVector

    @property
    def underflow(self) -> bool:
        return self.weights.underflow


@dataclass(frozen=True)
class MomentField:
    """Stacked local moments for m anchors (leading axis indexes the anchor)."""

    anchors: np.ndarray
    weights: np.ndarray
    underflow: np.ndarray
    mu: np.ndarray
    mu_A: np.ndarray | None
    C_uu: np.ndarray
    C_uA: np.ndarray | None

    def at(self, m: int) -> LocalMoments:
        return LocalMoments(
            anchor=self.anchors[m],
            mu=self.mu[m],
            mu_A=None if self.mu_A is None else self.mu_A[m],
            C_uu=self.C_uu[m],
            C_uA=None if self.C_uA is None else self.C_uA[m],
            weights=WeightVector(self.weights[m], self.anchors[m], bool(self.underflow[m])),
        )


def weighted_moments(weights: np.ndarray, U: np.ndarray, F: np.ndarray | None = None):
    """Moments of U (and F) under each row of a row-stochastic weight matrix.

    Returns ``(mu, mu_A, C_uu, C_uA)`` with a leading anchor axis; the
    feature entries are ``None`` when ``F`` is.
    """
    mu = weights @ U
    dU = U[None, :, :] - mu[:, None, :]
    C_uu = np.einsum("mj,mjk,mjl->mkl", weights, dU, dU)
    C_uu = 0.5 * (C_uu + np.swapaxes(C_uu, 1, 2))
    if F is None:
        return mu, None, C_uu, None
    mu_A = weights @ F
    dF = F[None, :, :] - mu_A[:, None, :]
    C_uA = np.einsum("mj,mjk,mjl->mkl", weights, dU, dF)
    return mu, mu_A, C_uu, C_uA


def moment_field(spec: KernelSpec, ensemble: Ensemble, anchors, with_features: bool = True) -> MomentField:
    anchors = np.asarray(anchors, dtype=float).reshape(-1, ensemble.dim)
    W, underflow = weight_matrix(spec, ensemble.particles, anchors)
    F = ensemble.require_features() if with_features else None
    mu, mu_A, C_uu, C_uA = weighted_moments(W, ensemble.particles, F)
    return MomentField(anchors, W, underflow, mu, mu_A, C_uu, C_uA)


def local_moments(spec: KernelSpec, ensemble: Ensemble, x) -> LocalMoments:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (ensemble.dim,):
        raise ValueError(f"anchor has shape {x.shape}, expected ({ensemble.dim},)")
    return moment_field(spec, ensemble, x[None, :], with_features=ensemble.features is not None).at(0)


def _check_symmetric(C: np.ndarray, tol: float = 1e-10) -> None:
    asym = np.max(np.abs(C - np.swapaxes(C, -1, -2)), initial=0.0)
    scale = max(1.0, float(np.max(np.abs(C), initial=0.0)))
    if asym > tol * scale:
        raise ValueError(f"matrix is not symmetric (max asymmetry {asym:.3e})")


def spectral_pinv(C, rel_tol: float = DEFAULT_REL_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Pseudo-inverse of a (stack of) symmetric PSD matrices and their ranks.

    Eigenvalues below ``rel_tol * lambda_max`` are treated as zero.
    """
    C = np.asarray(C, dtype=float)
    _check_symmetric(C)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    lam, Q = np.linalg.eigh(C)
    lam_max = lam[..., -1:]
    keep = (lam > rel_tol * lam_max) & (lam_max > 0)
    inv_lam = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
    P = np.einsum("...ik,...k,...jk->...ij", Q, inv_lam, Q)
    return 0.5 * (P + np.swapaxes(P, -1, -2)), keep.sum(axis=-1)


def regularized_inverse(C, rel_tol: float = DEFAULT_REL_TOL) -> np.ndarray:
    return spectral_pinv(C, rel_tol)[0]


class FrameRankError(ValueError):
    """Raised when a frame does not span the space; carries the reconstruction residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass(frozen=True)
class Frame:
    """Finite frame ``{phi_i}`` in R^p stored as the rows of ``vectors``."""

    vectors: np.ndarray
    anchor: np.ndarray | None = None
    rel_tol: float = DEFAULT_REL_TOL
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        vectors = np.array(self.vectors, dtype=float)
        if vectors.ndim != 2:
            raise ValueError("frame vectors must be a (J, p) array")
        vectors.setflags(write=False)
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def analysis(self, u) -> np.ndarray:
        return self.vectors @ np.asarray(u, dtype=float)

    def synthesis(self, alpha) -> np.ndarray:
        return np.asarray(alpha, dtype=float) @ self.vectors

    def operator(self) -> np.ndarray:
        S = self.vectors.T @ self.vectors
        return 0.5 * (S + S.T)

    def grammian(self) -> np.ndarray:
        return self.vectors @ self.vectors.T

    @property
    def rank(self) -> int:
        s = np.linalg.svd(self.vectors, compute_uv=False)
        if s.size == 0 or s[0] == 0:
            return 0
        return int(np.sum(s > np.sqrt(self.rel_tol) * s[0]))

    @property
    def spans(self) -> bool:
        return self.rank >= self.dim

    def _inverse(self) -> np.ndarray:
        if "inv" not in self._cache:
            self._cache["inv"] = regularized_inverse(self.operator(), self.rel_tol)
        return self._cache["inv"]

    def _inverse_sqrt(self) -> np.ndarray:
        if "inv_sqrt" not in self._cache:
            lam, Q = np.linalg.eigh(self.operator())
            keep = lam > self.rel_tol * lam[-1]
            inv_sqrt = np.where(keep, 1.0 / np.sqrt(np.where(keep, lam, 1.0)), 0.0)
            self._cache["inv_sqrt"] = (Q * inv_sqrt) @ Q.T
        return self._cache["inv_sqrt"]

    def reconstruct(self, u, variant: int = 1) -> np.ndarray:
        """Rebuild ``u`` from its frame coefficients.

        Variants::

            1: sum_i <u, phi_i> S^-1 phi_i
            2: sum_i <u, S^-1 phi_i> phi_i
            3: sum_i <S^-1 u, phi_i> phi_i
            4: sum_i <u, S^-1/2 phi_i> S^-1/2 phi_i
        """
        u = np.asarray(u, dtype=float)
        phi = self.vectors
        if variant == 1:
            out = self._inverse() @ self.synthesis(self.analysis(u))
        elif variant == 2:
            dual = phi @ self._inverse()
            out = (dual @ u) @ phi
        elif variant == 3:
            out = self.synthesis(self.analysis(self._inverse() @ u))
        elif variant == 4:
            tight = phi @ self._inverse_sqrt()
            out = (tight @ u) @ tight
        else:
            raise ValueError(f"unknown reconstruction variant {variant}")
        if not self.spans:
            residual = float(np.linalg.norm(out - u))
            raise FrameRankError(
                f"frame of rank {self.rank} does not span R^{self.dim}", residual
            )
        return out


def global_frame(ensemble: Ensemble, rel_tol: float = DEFAULT_REL_TOL) -> Frame:
    """Frame ``phi_i = (u_i - mean) / sqrt(J - 1)``; its frame operator is ``C_uu``."""
    U = ensemble.particles
    return Frame((U - U.mean(axis=0)) / np.sqrt(len(U) - 1), None, rel_tol)


def local_frame(spec: KernelSpec, ensemble: Ensemble, x, rel_tol: float = DEFAULT_REL_TOL) -> Frame:
    """Frame field ``phi_i(x) = sqrt(kappa_i(x)) (u_i - mu(x))``; operator ``C_uu(x)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    W, _ = weight_matrix(spec, ensemble.particles, x[None, :])
    w = W[0]
    U = ensemble.particles
    return Frame(np.sqrt(w)[:, None] * (U - w @ U), x, rel_tol)
