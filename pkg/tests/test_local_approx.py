import numpy as np
import pytest

from lwek.kernels import KernelSpec, weight_matrix
from lwek.local_approx import (
    D2Variant,
    ModelVariant,
    build_model,
    d2_kappa,
    d_kappa,
    d_kappa_anchored,
    model_eval,
    weighted_lsq_cost,
)
from lwek.moments import Ensemble, global_moments, local_moments
from lwek.oracles import QuadratureMeasure, mf_d2_kappa, mf_d_kappa


def quad_map(U):
    return np.stack([U[:, 0] ** 2, U[:, 0] * U[:, 1]], axis=1)


def cubic_map(U):
    return np.stack([U[:, 0] ** 3 + U[:, 1], np.sin(U[:, 0] * U[:, 1])], axis=1)


def literal_nested_d2(spec, ens, x):
    """``D(D A[f])[g]`` by explicit double sums over particles, no einsum shortcuts."""
    U, F = ens.particles, ens.features
    J, p = U.shape

    def jac(z):
        w, _ = weight_matrix(spec, U, z[None, :])
        w = w[0]
        mu = sum(w[j] * U[j] for j in range(J))
        mu_A = sum(w[j] * F[j] for j in range(J))
        C = sum(w[j] * np.outer(U[j] - mu, U[j] - mu) for j in range(J))
        C_Au = sum(w[j] * np.outer(F[j] - mu_A, U[j] - mu) for j in range(J))
        return C_Au @ np.linalg.inv(C), w, mu, C

    _, w, mu, C = jac(np.asarray(x, float))
    Cinv = np.linalg.inv(C)
    D_at = [jac(U[i])[0] for i in range(J)]
    G_mean = sum(w[i] * D_at[i] for i in range(J))
    T = np.zeros((F.shape[1], p, p))
    for i in range(J):
        # feature i of the derivative map, regressed on position
        T += w[i] * np.einsum("kf,g->kfg", D_at[i] - G_mean, Cinv @ (U[i] - mu))
    return T


def test_linear_map_recovered():
    rng = np.random.default_rng(10)
    M = rng.normal(size=(2, 3))
    ens = Ensemble(rng.normal(size=(20, 3))).evaluate(lambda U: U @ M.T)
    for spec in [KernelSpec.flat(), KernelSpec.gaussian(0.7)]:
        for x in rng.normal(size=(5, 3)):
            jac = d_kappa(spec, ens, x)
            np.testing.assert_allclose(jac.matrix, M, rtol=1e-8, atol=1e-8)
            assert not jac.rank_deficient


def test_anchored_form_agrees():
    rng = np.random.default_rng(11)
    ens = Ensemble(rng.normal(size=(25, 2))).evaluate(cubic_map)
    spec = KernelSpec.gaussian(0.8)
    for x in rng.normal(size=(10, 2)):
        a = d_kappa(spec, ens, x).matrix
        b = d_kappa_anchored(spec, ens, x, cubic_map).matrix
        np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9 * np.abs(a).max())


def test_flat_kernel_is_statistical_linearization():
    rng = np.random.default_rng(12)
    ens = Ensemble(rng.normal(size=(30, 2))).evaluate(cubic_map)
    gm = global_moments(ens)
    expected = gm.C_uA.T @ np.linalg.inv(gm.C_uu)
    np.testing.assert_allclose(d_kappa(KernelSpec.flat(), ens, [9.0, 9.0]).matrix, expected, rtol=1e-10)


def test_huge_bandwidth_matches_flat():
    rng = np.random.default_rng(13)
    ens = Ensemble(rng.normal(size=(30, 2))).evaluate(cubic_map)
    diam = np.ptp(ens.particles, axis=0).max()
    flat = d_kappa(KernelSpec.flat(), ens, [0.0, 0.0]).matrix
    wide = d_kappa(KernelSpec.gaussian(1e6 * diam), ens, [0.3, -0.2]).matrix
    np.testing.assert_allclose(wide, flat, rtol=1e-6)


def test_rank_deficient_flagged():
    U = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    ens = Ensemble(U).evaluate(lambda U: U[:, :1] * 2.0)
    jac = d_kappa(KernelSpec.gaussian(1.0), ens, [1.0, 0.0])
    assert jac.rank_deficient
    np.testing.assert_allclose(jac.matrix, [[2.0, 0.0]], atol=1e-12)


def test_ensemble_converges_to_mean_field():
    spec = KernelSpec.gaussian(0.5)
    x = np.array([np.pi / 4])
    target = mf_d_kappa(spec, QuadratureMeasure.uniform([[-3.0, 3.0]]), np.sin, x).matrix[0, 0]
    medians = []
    for J in [100, 1000, 10000]:
        errs = []
        for seed in range(20):
            U = np.random.default_rng(seed).uniform(-3, 3, size=(J, 1))
            ens = Ensemble(U).evaluate(np.sin)
            errs.append(abs(d_kappa(spec, ens, x).matrix[0, 0] - target))
        medians.append(np.median(errs))
    assert medians[0] >= medians[1] >= medians[2]
    assert medians[2] <= 5e-2


def test_d2_linear_is_zero():
    rng = np.random.default_rng(14)
    M = rng.normal(size=(2, 2))
    ens = Ensemble(rng.normal(size=(20, 2))).evaluate(lambda U: U @ M.T)
    for v in D2Variant:
        T = d2_kappa(KernelSpec.gaussian(1.0), ens, [0.1, 0.2], v).tensor
        assert np.abs(T).max() <= 1e-9 * np.abs(M).max()


def test_d2_variants_relation():
    rng = np.random.default_rng(15)
    ens = Ensemble(rng.normal(size=(30, 2))).evaluate(quad_map)
    spec = KernelSpec.gaussian(1.0)
    x = np.array([0.2, -0.1])
    m0, m1, m2 = (d2_kappa(spec, ens, x, v).tensor for v in D2Variant)
    np.testing.assert_array_equal(m2, np.swapaxes(m1, 1, 2))
    np.testing.assert_allclose(m0, 0.5 * (m1 + m2), rtol=1e-15)
    np.testing.assert_array_equal(m0, np.swapaxes(m0, 1, 2))
    f, g = rng.normal(size=2), rng.normal(size=2)
    bil = d2_kappa(spec, ens, x)
    np.testing.assert_allclose(bil(f, g), bil(g, f), rtol=1e-12)


def test_d2_variants_differ_in_2d():
    # M1 is not symmetric in (f, g) for a generic 2d ensemble, so M1 != M2
    rng = np.random.default_rng(15)
    ens = Ensemble(rng.normal(size=(30, 2))).evaluate(quad_map)
    spec = KernelSpec.gaussian(1.0)
    x = np.array([0.2, -0.1])
    m1 = d2_kappa(spec, ens, x, "M1").tensor
    m2 = d2_kappa(spec, ens, x, "M2").tensor
    assert np.linalg.norm(m1 - m2) > 1e-3 * np.linalg.norm(m1)


def test_d2_variants_agree_in_1d():
    rng = np.random.default_rng(16)
    ens = Ensemble(rng.uniform(-2, 2, size=(40, 1))).evaluate(lambda U: np.sin(U) + U**2)
    spec = KernelSpec.gaussian(0.6)
    tensors = [d2_kappa(spec, ens, [0.3], v).tensor for v in D2Variant]
    for t in tensors[1:]:
        np.testing.assert_allclose(t, tensors[0], rtol=1e-12)


@pytest.mark.parametrize("dim", [1, 2])
def test_composition_identity(dim):
    rng = np.random.default_rng(17 + dim)
    U = rng.normal(size=(12, dim))
    fwd = (lambda U: np.sin(U) + U**2) if dim == 1 else cubic_map
    ens = Ensemble(U).evaluate(fwd)
    spec = KernelSpec.gaussian(0.9)
    x = rng.normal(size=dim)
    nested = literal_nested_d2(spec, ens, x)
    m2 = d2_kappa(spec, ens, x, D2Variant.M2).tensor
    np.testing.assert_allclose(m2, nested, rtol=1e-7, atol=1e-7 * np.abs(nested).max())


def test_quadratic_form_mean_field_hessian():
    Q = np.array([[1.0, 0.3], [0.3, -0.5]])
    A = lambda Z: np.einsum("nl,lm,nm->n", Z, Q, Z)[:, None]  # noqa: E731
    measure = QuadratureMeasure.uniform([[-2.0, 2.0], [-2.0, 2.0]], n_nodes=101)
    T = mf_d2_kappa(KernelSpec.gaussian(0.2), measure, A, [0.1, -0.2], cutoff=1e-3).tensor[0]
    np.testing.assert_allclose(T, 2 * Q, rtol=5e-2, atol=5e-2 * np.abs(2 * Q).max())


def test_models_anchor_and_shift():
    rng = np.random.default_rng(18)
    ens = Ensemble(rng.normal(size=(30, 2))).evaluate(cubic_map)
    spec = KernelSpec.gaussian(0.8)
    x = np.array([0.4, 0.1])
    lm = local_moments(spec, ens, x)
    xi = rng.normal(size=(6, 2))
    for order in (1, 2):
        ls = build_model(spec, ens, x, order)
        an = build_model(spec, ens, x, order, ModelVariant.ANCHORED, forward=cubic_map)
        np.testing.assert_array_equal(model_eval(an, lm.mu), cubic_map(lm.mu[None])[0])
        shift = cubic_map(lm.mu[None])[0] - lm.mu_A
        np.testing.assert_allclose(an(xi) - ls(xi), np.broadcast_to(shift, (6, 2)), atol=1e-12)
    with pytest.raises(ValueError):
        build_model(spec, ens, x, 1, ModelVariant.ANCHORED)
    with pytest.raises(ValueError):
        build_model(spec, ens, x, 3)


def test_linear_model_exact():
    rng = np.random.default_rng(19)
    M = rng.normal(size=(2, 2))
    b = rng.normal(size=2)
    fwd = lambda U: U @ M.T + b  # noqa: E731
    ens = Ensemble(rng.normal(size=(20, 2))).evaluate(fwd)
    xi = rng.normal(size=(10, 2)) * 3
    model = build_model(KernelSpec.gaussian(0.5), ens, [0.2, 0.2], 2)
    np.testing.assert_allclose(model(xi), fwd(xi), rtol=1e-8, atol=1e-8)


def test_sine_model_near_anchor():
    x = np.array([np.pi / 4])
    U = np.random.default_rng(0).uniform(-3, 3, size=(100, 1))
    ens = Ensemble(U).evaluate(np.sin)
    model = build_model(KernelSpec.gaussian(0.2), ens, x)
    xi = np.linspace(x[0] - 0.2, x[0] + 0.2, 401)[:, None]
    assert np.max(np.abs(model(xi) - np.sin(xi))) <= 0.05


def test_least_squares_minimality_and_gap():
    rng = np.random.default_rng(20)
    ens = Ensemble(rng.normal(size=(30, 2))).evaluate(cubic_map)
    spec = KernelSpec.gaussian(0.9)
    x = np.array([0.1, 0.3])
    best = build_model(spec, ens, x)
    v_best = weighted_lsq_cost(spec, ens, x, best)
    for scale in (1e-3, 1e-1, 1.0):
        for _ in range(100):
            dM, db = scale * rng.normal(size=(2, 2)), scale * rng.normal(size=2)
            cand = lambda U, dM=dM, db=db: best(U) + U @ dM.T + db  # noqa: E731
            assert weighted_lsq_cost(spec, ens, x, cand) >= v_best
    anchored = build_model(spec, ens, x, 1, ModelVariant.ANCHORED, forward=cubic_map)
    lm = local_moments(spec, ens, x)
    gap = 0.5 * np.sum((cubic_map(lm.mu[None])[0] - lm.mu_A) ** 2)
    np.testing.assert_allclose(weighted_lsq_cost(spec, ens, x, anchored) - v_best, gap, rtol=1e-9)


def test_interpolating_candidate_has_zero_cost():
    rng = np.random.default_rng(21)
    ens = Ensemble(rng.normal(size=(10, 2))).evaluate(cubic_map)
    assert weighted_lsq_cost(KernelSpec.gaussian(1.0), ens, [0, 0], cubic_map) == 0.0


def test_orthogonal_feature_rotation_commutes():
    rng = np.random.default_rng(22)
    R, _ = np.linalg.qr(rng.normal(size=(2, 2)))
    ens = Ensemble(rng.normal(size=(25, 2))).evaluate(cubic_map)
    rot = Ensemble(ens.particles).evaluate(lambda U: cubic_map(U) @ R.T)
    spec = KernelSpec.gaussian(0.7)
    x = np.array([0.2, -0.4])
    xi = rng.normal(size=(5, 2))
    a = build_model(spec, ens, x, 2)(xi) @ R.T
    b = build_model(spec, rot, x, 2)(xi)
    np.testing.assert_allclose(b, a, rtol=1e-9, atol=1e-9 * np.abs(a).max())
