"""Radial kernels and the normalised weight field they induce on an ensemble."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

#: Denominators below this value trigger the nearest-particle fallback.
UNDERFLOW_GUARD = 1e-290
_LOG_UNDERFLOW_GUARD = math.log(UNDERFLOW_GUARD)


class KernelKind(str, enum.Enum):
    FLAT = "flat"
    GAUSSIAN = "gaussian"
    TRUNCATED_GAUSSIAN = "truncated_gaussian"


@dataclass(frozen=True)
class KernelSpec:
    """Radial kernel ``k(u, v) = K(|u - v|)``.

    The Gaussian profile is ``exp(-s**2 / (2 r**2))`` without its normalising
    constant; the constant cancels in every weight ratio, so it is never
    needed. ``bandwidth`` is ignored by the flat kernel. The truncated
    Gaussian is zero beyond ``truncation_radius`` (default ``3 * bandwidth``).
    """

    kind: KernelKind = KernelKind.GAUSSIAN
    bandwidth: float = 1.0
    truncation_radius: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", KernelKind(self.kind))
        if self.kind is not KernelKind.FLAT:
            if not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
                raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")
        if self.truncation_radius is not None:
            if self.kind is not KernelKind.TRUNCATED_GAUSSIAN:
                raise ValueError("truncation_radius only applies to the truncated Gaussian")
            if not self.truncation_radius > 0:
                raise ValueError("truncation_radius must be positive")

    @classmethod
    def flat(cls) -> "KernelSpec":
        return cls(KernelKind.FLAT)

    @classmethod
    def gaussian(cls, bandwidth: float) -> "KernelSpec":
        return cls(KernelKind.GAUSSIAN, bandwidth)

    @property
    def radius(self) -> float:
        """Support radius (``inf`` unless truncated)."""
        if self.kind is KernelKind.TRUNCATED_GAUSSIAN:
            if self.truncation_radius is None:
                return 3.0 * self.bandwidth
            return self.truncation_radius
        return math.inf

    def log_profile(self, dist_sq):
        """``log K`` as a function of squared distance (``-inf`` outside the support)."""
        dist_sq = np.asarray(dist_sq, dtype=float)
        if self.kind is KernelKind.FLAT:
            return np.zeros_like(dist_sq)
        out = dist_sq * (-0.5 / self.bandwidth**2)
        if self.kind is KernelKind.TRUNCATED_GAUSSIAN:
            out = np.where(dist_sq <= self.radius**2, out, -np.inf)
        return out

    def profile(self, dist_sq):
        return np.exp(self.log_profile(dist_sq))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "bandwidth": self.bandwidth,
            "truncation_radius": self.truncation_radius,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KernelSpec":
        return cls(
            KernelKind(data.get("kind", "gaussian")),
            float(data.get("bandwidth", 1.0)),
            data.get("truncation_radius"),
        )


@dataclass(frozen=True)
class WeightVector:
    """Point on the J-simplex: normalised kernel weights seen from ``anchor``.

    ``underflow`` is set when the kernel sum fell below :data:`UNDERFLOW_GUARD`
    and the weights were replaced by an indicator on the nearest particle.
    """

    weights: np.ndarray
    anchor: np.ndarray
    underflow: bool = False

    def __len__(self):
        return len(self.weights)

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.weights, dtype=dtype)


def _as_points(ensemble) -> np.ndarray:
    points = np.asarray(getattr(ensemble, "particles", ensemble), dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if points.ndim != 2 or len(points) == 0:
        raise ValueError("expected a non-empty (J, p) array of particles")
    return points


def _sq_distances(anchors: np.ndarray, points: np.ndarray) -> np.ndarray:
    # Differences are formed explicitly (no |a|^2 - 2ab + |b|^2 expansion) so
    # weights are invariant under common translations up to rounding.
    if points.shape[1] == 1:
        diff = anchors - points.T
        return np.square(diff, out=diff)
    diff = anchors[:, None, :] - points[None, :, :]
    return np.einsum("mjp,mjp->mj", diff, diff)


def kernel_eval(spec: KernelSpec, u, v) -> float:
    u = np.atleast_1d(np.asarray(u, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    diff = u - v
    return float(spec.profile(diff @ diff))


def weight_matrix(spec: KernelSpec, particles, anchors) -> tuple[np.ndarray, np.ndarray]:
    """Weights for many anchors at once.

    Returns ``(K, underflow)`` where row ``m`` of ``K`` holds the weights
    ``kappa^{(j)}(anchors[m])`` and ``underflow[m]`` flags the fallback.
    """
    points = _as_points(particles)
    anchors = np.asarray(anchors, dtype=float)
    if anchors.ndim == 1:
        anchors = anchors.reshape(-1, points.shape[1]) if points.shape[1] > 1 else anchors[:, None]
    if anchors.shape[1] != points.shape[1]:
        raise ValueError(
            f"anchor dimension {anchors.shape[1]} does not match particle dimension {points.shape[1]}"
        )
    n_anchor, n_part = len(anchors), len(points)
    if spec.kind is KernelKind.FLAT:
        return np.full((n_anchor, n_part), 1.0 / n_part), np.zeros(n_anchor, dtype=bool)

    dist_sq = _sq_distances(anchors, points)
    weights = spec.log_profile(dist_sq)
    top = weights.max(axis=1, keepdims=True)
    empty = ~np.isfinite(top).ravel()
    top[empty] = 0.0
    # in place: log K -> scaled kernel -> normalised weights
    weights -= top
    np.exp(weights, out=weights)
    total = weights.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        log_total = np.log(total) + top
    underflow = (log_total < _LOG_UNDERFLOW_GUARD).ravel() | empty
    total[total == 0.0] = 1.0
    weights /= total
    if underflow.any():
        nearest = np.argmin(dist_sq[underflow], axis=1)  # argmin picks the lowest index on ties
        fallback = np.zeros((int(underflow.sum()), n_part))
        fallback[np.arange(len(nearest)), nearest] = 1.0
        weights[underflow] = fallback
    return weights, underflow


def compute_weights(spec: KernelSpec, ensemble, x) -> WeightVector:
    points = _as_points(ensemble)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (points.shape[1],):
        raise ValueError(f"anchor has shape {x.shape}, expected ({points.shape[1]},)")
    weights, underflow = weight_matrix(spec, points, x[None, :])
    return WeightVector(weights[0], x, bool(underflow[0]))
