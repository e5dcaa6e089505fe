"""Particle dynamics of (locally weighted) ensemble Kalman methods and their integrator.

All right-hand sides return a (J, p) drift matrix for an ensemble whose
features are already cached. The integrator evaluates the forward map once
per particle per step (plus once at the ensemble mean for EnSRF).
"""
from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .kernels import KernelKind, KernelSpec, weight_matrix
from .moments import Ensemble, global_moments, moment_field

log = logging.getLogger(__name__)


class IntegrationError(RuntimeError):
    """Non-finite state during integration; keeps the last finite snapshot."""

    def __init__(self, message: str, step: int, last_finite: Ensemble, time: float):
        super().__init__(message)
        self.step = step
        self.last_finite = last_finite
        self.time = time


@dataclass(frozen=True)
class ForwardProblem:
    """Forward map ``A`` (batched: (n, p) -> (n, d)) with data ``y``.

    The misfit is ``0.5 |y - A(u)|^2``, i.e. unit observation noise. A
    different noise level is expressed by whitening ``A`` and ``y``.
    """

    forward: Callable[[np.ndarray], np.ndarray]
    data: np.ndarray
    jacobian: Callable[[np.ndarray], np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "data", np.atleast_1d(np.asarray(self.data, dtype=float)))

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        if points.ndim == 1:
            return self(points[None, :])[0]
        out = np.asarray(self.forward(points), dtype=float)
        return out.reshape(len(points), -1)

    def misfit(self, points) -> np.ndarray:
        r = self(points) - self.data
        return 0.5 * np.sum(r * r, axis=-1)


class Method(str, enum.Enum):
    EKI = "eki"
    LWEKI = "lweki"
    ENSRF = "ensrf"
    LWENSRF = "lwensrf"
    STOCHASTIC_ENKF = "stochastic_enkf"

    @property
    def weighted(self) -> bool:
        return self in (Method.LWEKI, Method.LWENSRF)


@dataclass(frozen=True)
class MethodSpec:
    method: Method = Method.LWEKI
    kernel: KernelSpec | None = None
    noise_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.method.weighted and self.kernel is None:
            raise ValueError(f"{self.method.value} needs a kernel")


@dataclass(frozen=True)
class TimeGrid:
    """Fixed-step forward Euler grid; ``n_steps = ceil(t_end / step)``."""

    t_end: float
    step: float

    def __post_init__(self):
        if not (self.t_end > 0 and self.step > 0 and math.isfinite(self.t_end)):
            raise ValueError("t_end and step must be positive and finite")
        if self.step > self.t_end:
            raise ValueError("step must not exceed t_end")

    @property
    def n_steps(self) -> int:
        # guard against t_end / step landing a rounding error above an integer
        return math.ceil(self.t_end / self.step - 1e-9)


def _residual(problem: ForwardProblem, ensemble: Ensemble) -> np.ndarray:
    return ensemble.require_features() - problem.data


def rhs_eki(problem: ForwardProblem, ensemble: Ensemble) -> np.ndarray:
    gm = global_moments(ensemble)
    return -_residual(problem, ensemble) @ gm.C_uA.T


def rhs_stochastic_enkf(problem: ForwardProblem, ensemble: Ensemble, noise_increment,
                        step: float) -> np.ndarray:
    """EnKF drift with perturbed data; ``noise_increment`` is a (J, d) Brownian increment over ``step``."""
    gm = global_moments(ensemble)
    noise = np.asarray(noise_increment, dtype=float) / step
    return -(_residual(problem, ensemble) + noise) @ gm.C_uA.T


def rhs_ensrf(problem: ForwardProblem, ensemble: Ensemble, mean_feature=None) -> np.ndarray:
    """Square-root filter drift; ``mean_feature`` is ``A(mean)`` if already known."""
    gm = global_moments(ensemble)
    if mean_feature is None:
        mean_feature = problem(gm.mean)
    target = 0.5 * (ensemble.require_features() + mean_feature) - problem.data
    return -target @ gm.C_uA.T


def _local_weights(kernel: KernelSpec, ensemble: Ensemble) -> np.ndarray | None:
    """Weights anchored at the particles, or ``None`` for the flat kernel (all rows 1/J)."""
    if kernel.kind is KernelKind.FLAT:
        return None
    # Anchors are the particles themselves, so every kernel sum is >= K(0) = 1
    # and the underflow fallback can never trigger here.
    return weight_matrix(kernel, ensemble.particles, ensemble.particles)[0]


def _local_feature_mean(W: np.ndarray | None, F: np.ndarray) -> np.ndarray:
    return np.broadcast_to(F.mean(axis=0), F.shape) if W is None else W @ F


def _weighted_cross_apply(W: np.ndarray | None, U: np.ndarray, F: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Row ``i``: ``sum_j W_ij (u_j - mu_i) <F_j - muF_i, v_i>`` using matrix products only."""
    if W is None:
        dU = U - U.mean(axis=0)
        C_uA = dU.T @ (F - F.mean(axis=0)) / len(U)
        return V @ C_uA.T
    mu = W @ U
    H = V @ F.T
    H -= np.einsum("id,id->i", W @ F, V)[:, None]
    H *= W
    # one product yields both sum_j WH_ij u_j and the row sums
    S = H @ np.hstack([U, np.ones((len(U), 1))])
    return S[:, :-1] - S[:, -1:] * mu


def _moment_form(kernel: KernelSpec, ensemble: Ensemble, V: np.ndarray) -> np.ndarray:
    mf = moment_field(kernel, ensemble, ensemble.particles)
    return np.einsum("ipd,id->ip", mf.C_uA, V)


def rhs_lweki(problem: ForwardProblem, kernel: KernelSpec, ensemble: Ensemble,
              check: bool = False) -> np.ndarray:
    """Each particle uses the covariance ``C_uA`` weighted around itself.

    The drift is evaluated in the expanded form
    ``-sum_j kappa_j(u_i) (u_j - mu(u_i)) <A(u_j) - mu_A(u_i), A(u_i) - y>``.
    With ``check=True`` the covariance form ``-C_uA(u_i) (A(u_i) - y)`` is
    evaluated as well and a relative disagreement above 1e-9 raises
    ``AssertionError``.
    """
    F = ensemble.require_features()
    R = _residual(problem, ensemble)
    drift = -_weighted_cross_apply(_local_weights(kernel, ensemble), ensemble.particles, F, R)
    if check:
        _assert_close(drift, -_moment_form(kernel, ensemble, R))
    return drift


def rhs_lwensrf(problem: ForwardProblem, kernel: KernelSpec, ensemble: Ensemble,
                check: bool = False) -> np.ndarray:
    """Locally weighted square-root drift; the mean feature is ``mu_A(u_i)``, not ``A`` of a mean."""
    F = ensemble.require_features()
    W = _local_weights(kernel, ensemble)
    target = 0.5 * (F + _local_feature_mean(W, F)) - problem.data
    drift = -_weighted_cross_apply(W, ensemble.particles, F, target)
    if check:
        _assert_close(drift, -_moment_form(kernel, ensemble, target))
    return drift


def _assert_close(a: np.ndarray, b: np.ndarray, rtol: float = 1e-9) -> None:
    scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(b), initial=0.0)), 1e-300)
    err = float(np.max(np.abs(a - b), initial=0.0))
    if err > rtol * scale:
        raise AssertionError(f"drift forms disagree: max error {err:.3e} (scale {scale:.3e})")


def brownian_increment(seed: int, step_index: int, shape: tuple[int, int], step: float) -> np.ndarray:
    """Unit-covariance Brownian increments over one step.

    The stream for each step is derived from ``(seed, step_index)`` and row
    ``i`` belongs to particle ``i``, so the noise does not depend on how the
    drift evaluation is scheduled.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & (2**63 - 1), int(step_index)]))
    return math.sqrt(step) * rng.standard_normal(shape)


def drift(problem: ForwardProblem, method: MethodSpec, ensemble: Ensemble, *,
          step: float | None = None, step_index: int = 0) -> np.ndarray:
    m = method.method
    if m is Method.EKI:
        return rhs_eki(problem, ensemble)
    if m is Method.LWEKI:
        return rhs_lweki(problem, method.kernel, ensemble)
    if m is Method.ENSRF:
        return rhs_ensrf(problem, ensemble)
    if m is Method.LWENSRF:
        return rhs_lwensrf(problem, method.kernel, ensemble)
    if step is None:
        raise ValueError("the stochastic EnKF needs the step size")
    shape = (ensemble.size, ensemble.feature_dim)
    dW = brownian_increment(method.noise_seed, step_index, shape, step)
    return rhs_stochastic_enkf(problem, ensemble, dW, step)


@dataclass
class Trajectory:
    times: list[float] = field(default_factory=list)
    snapshots: list[Ensemble] = field(default_factory=list)
    n_steps: int = 0
    stopped_early: bool = False

    @property
    def final(self) -> Ensemble:
        return self.snapshots[-1]

    def at(self, t: float) -> Ensemble:
        i = int(np.argmin(np.abs(np.asarray(self.times) - t)))
        return self.snapshots[i]


def integrate(problem: ForwardProblem, method: MethodSpec, grid: TimeGrid, initial: Ensemble, *,
              snapshot_every: int = 1, snapshot_times=None,
              stop: Callable[[int, Ensemble], bool] | None = None) -> Trajectory:
    """Forward Euler (Euler-Maruyama for the stochastic EnKF) with a fixed step.

    Snapshots are taken every ``snapshot_every`` steps, at the listed
    ``snapshot_times`` (rounded to the nearest step), and always at the
    start and end. ``stop(k, ensemble)`` may end the run after step ``k``.
    There is no step rejection: a non-finite state raises
    :class:`IntegrationError`.
    """
    if snapshot_every < 1:
        raise ValueError("snapshot_every must be >= 1")
    h = grid.step
    n = grid.n_steps
    wanted = set()
    if snapshot_times is not None:
        wanted = {int(round(t / h)) for t in snapshot_times}
    state = initial.evaluate(problem)
    if not np.all(np.isfinite(state.particles)):
        raise IntegrationError("initial ensemble is not finite", 0, state, 0.0)
    traj = Trajectory([0.0], [state])
    for k in range(1, n + 1):
        step_drift = drift(problem, method, state, step=h, step_index=k - 1)
        particles = state.particles + h * step_drift
        if not np.all(np.isfinite(particles)):
            raise IntegrationError(
                f"non-finite particle state at step {k} (t={k * h:.6g})", k, state, (k - 1) * h
            )
        state = Ensemble(particles).evaluate(problem)
        if not np.all(np.isfinite(state.features)):
            raise IntegrationError(f"non-finite forward evaluation at step {k}", k, state, k * h)
        traj.n_steps = k
        halt = stop is not None and stop(k, state)
        if k % snapshot_every == 0 or k == n or k in wanted or halt:
            traj.times.append(k * h)
            traj.snapshots.append(state)
        if halt:
            traj.stopped_early = k < n
            log.info("stop criterion met at step %d (t=%.4g)", k, k * h)
            break
    return traj
