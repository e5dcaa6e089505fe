"""Acceptance criteria, one test per criterion at its stated tolerance.

Every test records a PASS/FAIL line (see ``conftest.report``) before asserting.
"""
import time

import numpy as np

from lwek.dynamics import ForwardProblem, Method, MethodSpec, TimeGrid, integrate, rhs_eki, rhs_lweki
from lwek.experiments import Experiment, default_config, run
from lwek.kernels import KernelSpec, compute_weights
from lwek.local_approx import D2Variant, ModelVariant, build_model, d2_kappa, d_kappa, weighted_lsq_cost
from lwek.moments import Ensemble, global_moments, local_frame, local_moments
from lwek.oracles import QuadratureMeasure, mf_d_kappa, statistical_linearization


def rel(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def timing(t0, budget):
    elapsed = time.perf_counter() - t0
    return elapsed, f"{elapsed:.1f}s (budget {budget})"


def test_criterion_01_identity_suite(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = {"simplex": 0.0, "fundamental": 0.0, "frame_operator": 0.0, "reconstruction": 0.0}
    for _ in range(100):
        p = int(rng.integers(1, 4))
        U = rng.normal(size=(int(rng.integers(p + 2, 30)), p)) * rng.uniform(0.5, 3)
        ens = Ensemble(U)
        spec = KernelSpec.gaussian(rng.uniform(0.5, 3.0))
        x = rng.normal(size=p)
        w = compute_weights(spec, ens, x).weights
        worst["simplex"] = max(worst["simplex"], abs(w.sum() - 1), float(-min(w.min(), 0)))
        lm = local_moments(spec, ens, x)
        scale = 1 + np.max(np.linalg.norm(U, axis=1))
        worst["fundamental"] = max(worst["fundamental"], np.linalg.norm(w @ (U - lm.mu)) / scale)
        frame = local_frame(spec, ens, x)
        worst["frame_operator"] = max(worst["frame_operator"], rel(frame.operator(), lm.C_uu))
        u = rng.normal(size=p)
        for v in range(1, 5):
            worst["reconstruction"] = max(worst["reconstruction"], rel(frame.reconstruct(u, v), u))
    ok = all(val <= 1e-8 for val in worst.values())
    elapsed, t = timing(t0, "<1 s")
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, "identity suite", ok, f"max rel errors {detail}; tol 1e-8; {t}")
    assert ok


def test_criterion_02_linear_exactness(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    worst_d, worst_rhs = 0.0, 0.0
    for _ in range(20):
        M = rng.normal(size=(2, 3))
        y = rng.normal(size=2)
        problem = ForwardProblem(lambda U, M=M: U @ M.T, y)
        ens = Ensemble(rng.normal(size=(15, 3))).evaluate(problem)
        for spec in (KernelSpec.flat(), KernelSpec.gaussian(0.8)):
            worst_d = max(worst_d, rel(d_kappa(spec, ens, rng.normal(size=3)).matrix, M))
        grad = -(ens.features - y) @ M @ global_moments(ens).C_uu
        worst_rhs = max(worst_rhs, rel(rhs_eki(problem, ens), grad))
    ok = worst_d <= 1e-8 and worst_rhs <= 1e-8
    _, t = timing(t0, "<1 s")
    report(2, "linear exactness", ok, f"D_kappa vs M {worst_d:.1e}, rhs_eki vs gradient form {worst_rhs:.1e}; "
           f"tol 1e-8; {t}")
    assert ok


def test_criterion_03_variant_equality(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(300)
    worst_var, worst_lin = 0.0, 0.0
    for _ in range(20):
        ens = Ensemble(rng.normal(size=(30, 2))).evaluate(lambda U: np.stack([U[:, 0] ** 2, U[:, 0] * U[:, 1]], 1))
        spec = KernelSpec.gaussian(rng.uniform(0.7, 2.0))
        x = rng.normal(size=2) * 0.5
        m0, m1, m2 = (d2_kappa(spec, ens, x, v).tensor for v in D2Variant)
        scale = np.linalg.norm(m0)
        worst_var = max(worst_var, np.linalg.norm(m0 - m1) / scale, np.linalg.norm(m1 - m2) / scale)
        M = rng.normal(size=(2, 2))
        lin = Ensemble(ens.particles).evaluate(lambda U, M=M: U @ M.T)
        worst_lin = max(worst_lin, np.abs(d2_kappa(spec, lin, x).tensor).max() / np.abs(M).max())
    ok = worst_var <= 1e-7 and worst_lin <= 1e-9
    _, t = timing(t0, "<10 s")
    report(3, "variant equality", ok, f"max pairwise rel gap M0/M1/M2 {worst_var:.2e} (tol 1e-7); "
           f"linear-map tensor {worst_lin:.1e}; {t}")
    assert ok


def test_criterion_04_limit_ladder(report):
    t0 = time.perf_counter()
    measure = QuadratureMeasure.uniform([[-3.0, 3.0]])
    x = [np.pi / 4]
    errs = [abs(mf_d_kappa(KernelSpec.gaussian(r), measure, np.sin, x).matrix[0, 0] - np.cos(np.pi / 4))
            for r in (0.4, 0.2, 0.1, 0.05)]
    wide = mf_d_kappa(KernelSpec.gaussian(1e3), measure, np.sin, x).matrix
    gap = float(np.abs(wide - statistical_linearization(measure, np.sin)).max())
    ok = all(a > b for a, b in zip(errs, errs[1:])) and errs[-1] <= 1e-2 and gap <= 1e-4
    _, t = timing(t0, "<30 s")
    report(4, "limit ladder", ok, "errors " + ", ".join(f"{e:.2e}" for e in errs)
           + f" (final tol 1e-2); r=1e3 vs linearization {gap:.1e} (tol 1e-4); {t}")
    assert ok


def test_criterion_05_least_squares(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(500)
    fwd = lambda U: np.stack([np.sin(U[:, 0]) + U[:, 1] ** 2, U[:, 0] * U[:, 1]], 1)  # noqa: E731
    ens = Ensemble(rng.normal(size=(40, 2))).evaluate(fwd)
    spec = KernelSpec.gaussian(0.9)
    x = np.array([0.2, -0.3])
    best = build_model(spec, ens, x)
    v_best = weighted_lsq_cost(spec, ens, x, best)
    violations = 0
    for _ in range(100):
        dM, db = rng.normal(size=(2, 2)) * 10 ** rng.uniform(-3, 0), rng.normal(size=2) * 10 ** rng.uniform(-3, 0)
        if weighted_lsq_cost(spec, ens, x, lambda U: best(U) + U @ dM.T + db) < v_best:
            violations += 1
    lm = local_moments(spec, ens, x)
    anchored = build_model(spec, ens, x, 1, ModelVariant.ANCHORED, forward=fwd)
    gap_expected = 0.5 * float(np.sum((fwd(lm.mu[None])[0] - lm.mu_A) ** 2))
    gap_err = abs(weighted_lsq_cost(spec, ens, x, anchored) - v_best - gap_expected) / gap_expected
    ok = violations == 0 and gap_err <= 1e-9
    _, t = timing(t0, "<5 s")
    report(5, "least-squares lemma", ok, f"{violations}/100 perturbations beat A_x; half-gap rel err {gap_err:.1e} "
           f"(tol 1e-9); {t}")
    assert ok


def test_criterion_06_stall_counterexample(report):
    t0 = time.perf_counter()
    # symmetric and dyadic, so the unweighted moments cancel exactly
    U = np.array([[-1.5], [-1.25], [-1.0], [-0.75], [0.75], [1.0], [1.25], [1.5]])
    problem = ForwardProblem(lambda U: U**2, [2.0])
    ens = Ensemble(U).evaluate(problem)
    eki = rhs_eki(problem, ens)
    lw = rhs_lweki(problem, KernelSpec.gaussian(0.1), ens)
    ok = bool(np.all(eki == 0.0)) and float(np.abs(lw).max()) > 1e-3
    _, t = timing(t0, "<1 s")
    report(6, "stall counterexample", ok, f"max |rhs_eki| {np.abs(eki).max():.1e} (must be 0); "
           f"max |rhs_lweki| {np.abs(lw).max():.3e} (> 1e-3); {t}")
    assert ok


def test_criterion_07_himmelblau(report, tmp_path):
    t0 = time.perf_counter()
    covered, eki_counts = [], []
    for seed in range(5):
        cfg = default_config(Experiment.INVERT_HIMMELBLAU, tmp_path / f"s{seed}")
        cfg.seed = seed
        res = run(cfg).results
        covered.append(res["lweki"]["roots_covered"])
        eki_counts.append(res["eki"]["roots_covered"])
    default_seed = default_config(Experiment.INVERT_HIMMELBLAU).seed
    n_full = sum(c == 4 for c in covered)
    ok = n_full >= 4 and eki_counts[default_seed] == 1
    _, t = timing(t0, "~1 min")
    report(7, "Himmelblau inversion", ok, f"lwEKI roots covered per seed {covered} ({n_full}/5 with all 4, need 4); "
           f"EKI roots covered per seed {eki_counts} (default seed {default_seed} must be 1); {t}")
    assert ok


def test_criterion_08_bimodal_filter(report, tmp_path):
    t0 = time.perf_counter()
    res = run(default_config(Experiment.ENSRF_1D, tmp_path)).results
    post_modes = np.asarray(res["posterior_modes"])
    best = res["lwensrf"]["best"]
    modes = np.asarray(best["modes"])
    located = len(modes) == 2 and len(post_modes) == 2 and bool(np.all(np.abs(modes - post_modes) <= 0.25))
    ens_modes = len(res["ensrf"]["best"]["modes"])
    ok = located and best["l1"] <= 0.35 and ens_modes == 1
    _, t = timing(t0, "~2 min")
    report(8, "1d bimodal filter", ok,
           f"posterior modes {np.round(post_modes, 3).tolist()}; lwEnSRF best t={best['time']:.2f} "
           f"modes {np.round(modes, 3).tolist()} L1 {best['l1']:.3f} (tol 0.35); EnSRF best modes {ens_modes}; {t}")
    assert ok


def test_criterion_09_shell(report, tmp_path):
    t0 = time.perf_counter()
    res = run(default_config(Experiment.SHELL_10D, tmp_path)).results
    lw, eki = res["lweki"], res["eki"]
    ratio = abs(eki["displacement"]) / abs(lw["displacement"])
    ok = 6.3 <= lw["mean_norm"] <= 7.1 and lw["fraction_in_6_7.5"] >= 0.8 and ratio < 0.1
    _, t = timing(t0, "~3 min")
    report(9, "10d shell", ok, f"stop t={res['t_stop']:.3f}; lwEKI mean norm {lw['mean_norm']:.3f} in [6.3, 7.1], "
           f"{100 * lw['fraction_in_6_7.5']:.1f}% in [6, 7.5] (need 80%); EKI/lwEKI displacement {ratio:.4f} "
           f"(< 0.1); {t}")
    assert ok


def test_criterion_10_linear_gaussian_homotopy(report):
    t0 = time.perf_counter()
    y = 1.0
    problem = ForwardProblem(lambda U: U, [y])
    init = Ensemble(np.random.default_rng(1000).standard_normal((2000, 1)))
    grid = TimeGrid(1.0, 1e-3)
    stats = {}
    for label, spec in (("EnSRF", MethodSpec(Method.ENSRF)),
                        ("flat lwEnSRF", MethodSpec(Method.LWENSRF, KernelSpec.flat()))):
        final = integrate(problem, spec, grid, init, snapshot_every=grid.n_steps).final.particles[:, 0]
        stats[label] = (final.mean(), final.var(ddof=1))
    ok = all(abs(m - y / 2) <= 5e-2 and abs(v - 0.5) <= 5e-2 for m, v in stats.values())
    _, t = timing(t0, "<1 min")
    detail = "; ".join(f"{k} mean {m:.4f} var {v:.4f}" for k, (m, v) in stats.items())
    report(10, "linear-Gaussian homotopy", ok, f"{detail} (target 0.5/0.5, tol 5e-2); {t}")
    assert ok


def test_criterion_11_determinism(report, tmp_path):
    t0 = time.perf_counter()
    mismatched, compared = [], 0
    configs = []
    for exp in (Experiment.INVERT_HIMMELBLAU, Experiment.ENSRF_1D, Experiment.CUSTOM):
        cfg = default_config(exp)
        cfg.grid = TimeGrid(0.05, 1e-3)
        cfg.snapshot_every = 10
        if exp is Experiment.ENSRF_1D:
            cfg.J = 200
            cfg.params = {**cfg.params, "snapshot_times": [0.05]}
        if exp is Experiment.CUSTOM:
            cfg.method = MethodSpec(Method.STOCHASTIC_ENKF, noise_seed=5)
        configs.append(cfg)
    for i, cfg in enumerate(configs):
        files = []
        for rep in ("a", "b"):
            cfg.output_dir = tmp_path / f"{i}{rep}"
            files.append(run(cfg).files)
        for name in files[0]:
            compared += 1
            if (tmp_path / f"{i}a" / name).read_bytes() != (tmp_path / f"{i}b" / name).read_bytes():
                mismatched.append(name)
        if files[0] != files[1]:
            mismatched.append(f"file list {i}")
    ok = not mismatched
    _, t = timing(t0, "n/a")
    report(11, "determinism", ok, f"{compared} CSV files compared byte-wise, {len(mismatched)} differ; {t}")
    assert ok
