"""Ensemble-based derivatives and local affine/quadratic models of a forward map."""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .kernels import KernelSpec
from .moments import DEFAULT_REL_TOL, Ensemble, LocalMoments, local_moments, moment_field, spectral_pinv


@dataclass(frozen=True)
class LocalJacobian:
    """``D_kappa A(x) = C_Au(x) C_uu(x)^+`` as a (d, p) matrix.

    ``rank_deficient`` marks anchors whose local covariance had to be
    pseudo-inverted; the derivative is then restricted to the local span.
    """

    anchor: np.ndarray
    matrix: np.ndarray
    rank_deficient: bool = False
    underflow: bool = False

    def __call__(self, f) -> np.ndarray:
        return self.matrix @ np.asarray(f, dtype=float)


class D2Variant(str, enum.Enum):
    M0 = "M0"  # symmetrised
    M1 = "M1"  # defining expression
    M2 = "M2"  # index-swapped


@dataclass(frozen=True)
class LocalBilinear:
    """Second-order derivative approximation as a (d, p, p) tensor ``T[k, f, g]``."""

    anchor: np.ndarray
    tensor: np.ndarray
    variant: D2Variant = D2Variant.M0

    def __call__(self, f, g) -> np.ndarray:
        return np.einsum("klm,l,m->k", self.tensor, np.asarray(f, float), np.asarray(g, float))


class ModelVariant(str, enum.Enum):
    LEAST_SQUARES = "least_squares"  # offset mu_A(x)
    ANCHORED = "anchored"  # offset A(mu(x))


def _apply(forward: Callable, x: np.ndarray) -> np.ndarray:
    out = np.asarray(forward(np.asarray(x, dtype=float)[None, :]), dtype=float)
    return out.reshape(-1)


def jacobian_field(spec: KernelSpec, ensemble: Ensemble, anchors, rel_tol: float = DEFAULT_REL_TOL):
    """Ensemble derivatives at many anchors.

    Returns ``(D, rank, underflow)`` with ``D`` of shape (m, d, p).
    """
    mf = moment_field(spec, ensemble, anchors)
    Cinv, rank = spectral_pinv(mf.C_uu, rel_tol)
    D = np.einsum("mkd,mkl->mdl", mf.C_uA, Cinv)
    return D, rank, mf.underflow


def d_kappa(spec: KernelSpec, ensemble: Ensemble, x, rel_tol: float = DEFAULT_REL_TOL) -> LocalJacobian:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    D, rank, underflow = jacobian_field(spec, ensemble, x[None, :], rel_tol)
    return LocalJacobian(x, D[0], bool(rank[0] < ensemble.dim), bool(underflow[0]))


def d_kappa_anchored(spec: KernelSpec, ensemble: Ensemble, x, forward: Callable,
                     rel_tol: float = DEFAULT_REL_TOL) -> LocalJacobian:
    """Same derivative, centring features at ``A(mu(x))`` instead of ``mu_A(x)``.

    Agrees with :func:`d_kappa` because the weighted deviations ``u_j - mu(x)``
    sum to zero. Costs one extra forward evaluation.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lm = local_moments(spec, ensemble, x)
    w = lm.weights.weights
    A_mu = _apply(forward, lm.mu)
    dU = ensemble.particles - lm.mu
    dF = ensemble.require_features() - A_mu
    C_Au = np.einsum("j,jd,jk->dk", w, dF, dU)
    Cinv, rank = spectral_pinv(lm.C_uu, rel_tol)
    return LocalJacobian(x, C_Au @ Cinv, bool(rank < ensemble.dim), lm.underflow)


def d2_kappa(spec: KernelSpec, ensemble: Ensemble, x, variant: D2Variant | str = D2Variant.M0,
             rel_tol: float = DEFAULT_REL_TOL) -> LocalBilinear:
    """Second-order ensemble derivative at ``x``.

    Needs ``D_kappa A`` at every particle and at ``mu(x)``, so the cost is
    O(J^2) kernel evaluations. ``M2[f, g]`` equals ``M1[g, f]``; ``M0`` is
    their average and the only variant that is symmetric by construction.
    """
    variant = D2Variant(variant)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lm = local_moments(spec, ensemble, x)
    w = lm.weights.weights
    Cinv, _ = spectral_pinv(lm.C_uu, rel_tol)
    phi = ensemble.particles - lm.mu
    dual = phi @ Cinv  # rows C^+ phi_j
    proj = lm.C_uu @ Cinv  # sum_j w_j phi_j dual_j^T

    anchors = np.vstack([ensemble.particles, lm.mu[None, :]])
    D, _, _ = jacobian_field(spec, ensemble, anchors, rel_tol)
    delta = D[:-1] - D[-1]  # (J, d, p)
    delta_proj = np.einsum("jkn,nm->jkm", delta, proj)

    # M1[k, f, g] = sum_i w_i dual_i[f] (Delta_i P)[k, g]
    m1 = np.einsum("i,il,ikm->klm", w, dual, delta_proj)
    if variant is D2Variant.M1:
        tensor = m1
    elif variant is D2Variant.M2:
        tensor = np.swapaxes(m1, 1, 2).copy()
    else:
        tensor = 0.5 * (m1 + np.swapaxes(m1, 1, 2))
    return LocalBilinear(x, tensor, variant)


@dataclass(frozen=True)
class LocalModel:
    """Affine or quadratic approximation of A around the weighted mean ``center``.

    ``model(xi) = offset + J (xi - center) [+ 0.5 T[xi - center, xi - center]]``
    """

    anchor: np.ndarray
    order: int
    variant: ModelVariant
    center: np.ndarray
    offset: np.ndarray
    jacobian: LocalJacobian
    bilinear: LocalBilinear | None = None

    def __call__(self, xi) -> np.ndarray:
        return model_eval(self, xi)


def model_eval(model: LocalModel, xi) -> np.ndarray:
    """Evaluate at one point (shape (p,)) or a batch (shape (n, p))."""
    xi = np.asarray(xi, dtype=float)
    single = xi.ndim == 1
    X = np.atleast_2d(xi) if not single else xi[None, :]
    h = X - model.center
    out = model.offset + h @ model.jacobian.matrix.T
    if model.order == 2:
        out = out + 0.5 * np.einsum("klm,nl,nm->nk", model.bilinear.tensor, h, h)
    return out[0] if single else out


def build_model(spec: KernelSpec, ensemble: Ensemble, x, order: int = 1,
                variant: ModelVariant | str = ModelVariant.LEAST_SQUARES,
                forward: Callable | None = None, rel_tol: float = DEFAULT_REL_TOL) -> LocalModel:
    """Local model of A seen from ``x``.

    The anchored variant needs ``forward`` for its single evaluation at
    ``mu(x)``; the value is stored in the model, so evaluating it later never
    calls the forward map again.
    """
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    variant = ModelVariant(variant)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    lm = local_moments(spec, ensemble, x)
    jac = d_kappa(spec, ensemble, x, rel_tol)
    if variant is ModelVariant.ANCHORED:
        if forward is None:
            raise ValueError("the anchored model needs the forward map")
        offset = _apply(forward, lm.mu)
    else:
        offset = lm.mu_A
    bilinear = d2_kappa(spec, ensemble, x, D2Variant.M0, rel_tol) if order == 2 else None
    return LocalModel(x, order, variant, lm.mu, np.asarray(offset), jac, bilinear)


def weighted_lsq_cost(spec: KernelSpec, ensemble: Ensemble, x, candidate: Callable) -> float:
    """``V(L) = 1/2 sum_i kappa_i(x) |A(u_i) - L(u_i)|^2`` for a batched map ``L``."""
    lm: LocalMoments = local_moments(spec, ensemble, x)
    pred = np.asarray(candidate(ensemble.particles), dtype=float).reshape(ensemble.size, -1)
    resid = ensemble.require_features() - pred
    return 0.5 * float(lm.weights.weights @ np.einsum("jd,jd->j", resid, resid))
