"""Experiment definitions: forward maps, priors, run configuration and the runners.

Each runner writes CSV bundles into the output directory and returns a
summary dict that ends up in the run manifest.
"""
from __future__ import annotations

import enum
import json
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .dynamics import ForwardProblem, IntegrationError, Method, MethodSpec, TimeGrid, integrate
from .kernels import KernelSpec
from .local_approx import ModelVariant, build_model
from .moments import Ensemble, format_csv, local_moments
from .oracles import kde, posterior_1d_bimodal, posterior_shell_pushforward

log = logging.getLogger(__name__)

#: Local maxima below this fraction of the peak height are not counted as modes.
MODE_REL_HEIGHT = 0.1


# ---------------------------------------------------------------- forward maps

def sine(U):
    return np.sin(U)


def himmelblau(U):
    U = np.atleast_2d(U)
    x1, x2 = U[:, 0], U[:, 1]
    return ((x1**2 + x2 - 11) ** 2 + (x1 + x2**2 - 7) ** 2)[:, None]


def himmelblau_gradient(x):
    x1, x2 = x
    a, b = x1**2 + x2 - 11, x1 + x2**2 - 7
    return np.array([4 * x1 * a + 2 * b, 2 * a + 4 * x2 * b])


def himmelblau_hessian(x):
    x1, x2 = x
    return np.array([[12 * x1**2 + 4 * x2 - 42, 4 * x1 + 4 * x2],
                     [4 * x1 + 4 * x2, 12 * x2**2 + 4 * x1 - 26]])


def himmelblau_map(U):
    U = np.atleast_2d(U)
    x1, x2 = U[:, 0], U[:, 1]
    return np.stack([x1**2 + x2, x1 + x2**2], axis=1)


def himmelblau_map_jacobian(x):
    x1, x2 = x
    return np.array([[2 * x1, 1.0], [1.0, 2 * x2]])


def quadratic_1d(U):
    return U + 0.75 * U**2


def norm_squared(U):
    return np.sum(np.atleast_2d(U) ** 2, axis=1, keepdims=True)


def square(U):
    return U**2


FORWARD_MAPS: dict[str, Callable] = {
    "sine": sine,
    "himmelblau": himmelblau,
    "himmelblau_map": himmelblau_map,
    "quadratic_1d": quadratic_1d,
    "norm_squared": norm_squared,
    "square": square,
}


def himmelblau_roots() -> np.ndarray:
    """The four solutions of ``himmelblau_map(x) = (11, 7)``.

    Substituting ``x2 = 11 - x1^2`` into the second equation gives the
    quartic ``x1^4 - 22 x1^2 + x1 + 114 = 0``.
    """
    x1 = np.roots([1.0, 0.0, -22.0, 1.0, 114.0])
    x1 = np.sort(x1[np.abs(x1.imag) < 1e-9].real)[::-1]
    return np.stack([x1, 11.0 - x1**2], axis=1)


def root_assignment(final: Ensemble, roots, radius: float) -> np.ndarray:
    """Particles within ``radius`` of each root (nearest root wins)."""
    roots = np.asarray(roots, dtype=float)
    dist = np.linalg.norm(final.particles[:, None, :] - roots[None, :, :], axis=2)
    nearest = np.argmin(dist, axis=1)
    inside = dist[np.arange(len(nearest)), nearest] <= radius
    return np.bincount(nearest[inside], minlength=len(roots))


# ---------------------------------------------------------------- configuration

class Experiment(str, enum.Enum):
    APPROX_SINE = "approx_sine"
    APPROX_HIMMELBLAU = "approx_himmelblau"
    INVERT_HIMMELBLAU = "invert_himmelblau"
    ENSRF_1D = "ensrf_1d"
    SHELL_10D = "shell_10d"
    CUSTOM = "custom"


FIGURES = {
    Experiment.APPROX_SINE: "approx_sin",
    Experiment.APPROX_HIMMELBLAU: "approx_himmelblaur1 / approx_himmelblaur5",
    Experiment.INVERT_HIMMELBLAU: "himmelblau_setup / himmelblau_linear",
    Experiment.ENSRF_1D: "experiments_lwEnSRF / experiments_sidebyside",
    Experiment.SHELL_10D: "experiments_ring",
    Experiment.CUSTOM: "none",
}


@dataclass(frozen=True)
class Prior:
    kind: str = "gaussian"  # or "uniform_box"
    mean: tuple = (0.0,)
    sigma: float = 1.0
    bounds: tuple = ((-1.0, 1.0),)

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform_box"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        object.__setattr__(self, "mean", tuple(float(m) for m in np.atleast_1d(self.mean)))
        object.__setattr__(self, "bounds", tuple(tuple(map(float, b)) for b in np.atleast_2d(self.bounds)))
        if self.kind == "gaussian" and not self.sigma > 0:
            raise ValueError("prior sigma must be positive")

    @property
    def dim(self) -> int:
        return len(self.mean) if self.kind == "gaussian" else len(self.bounds)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.kind == "gaussian":
            return np.asarray(self.mean) + self.sigma * rng.standard_normal((size, self.dim))
        lo, hi = np.asarray(self.bounds).T
        return lo + (hi - lo) * rng.random((size, self.dim))

    @classmethod
    def gaussian(cls, dim: int, sigma: float, mean: float = 0.0) -> "Prior":
        return cls("gaussian", (mean,) * dim, sigma)

    @classmethod
    def uniform_box(cls, bounds) -> "Prior":
        return cls("uniform_box", (0.0,), 1.0, bounds)

    def to_dict(self) -> dict:
        if self.kind == "gaussian":
            return {"kind": self.kind, "mean": list(self.mean), "sigma": self.sigma}
        return {"kind": self.kind, "bounds": [list(b) for b in self.bounds]}

    @classmethod
    def from_dict(cls, data: dict) -> "Prior":
        kind = data.get("kind", "gaussian")
        if kind == "gaussian":
            mean = data.get("mean", [0.0])
            if "dim" in data:
                mean = list(np.broadcast_to(np.atleast_1d(mean), (int(data["dim"]),)))
            return cls(kind, tuple(mean), float(data.get("sigma", 1.0)))
        return cls(kind, bounds=tuple(map(tuple, data["bounds"])))


@dataclass
class RunConfig:
    experiment: Experiment
    method: MethodSpec
    kernel: KernelSpec
    J: int
    grid: TimeGrid
    seed: int
    prior: Prior
    output_dir: Path
    snapshot_every: int = 1000
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.experiment = Experiment(self.experiment)
        self.output_dir = Path(self.output_dir)
        if self.J < 2:
            raise ValueError("J must be at least 2")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be positive")
        if not -(2**63) <= int(self.seed) < 2**64:
            raise ValueError("seed must fit in 64 bits")

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment.value,
            "method": {"method": self.method.method.value, "noise_seed": self.method.noise_seed},
            "kernel": self.kernel.to_dict(),
            "J": self.J,
            "grid": {"t_end": self.grid.t_end, "step": self.grid.step},
            "seed": self.seed,
            "prior": self.prior.to_dict(),
            "output_dir": str(self.output_dir),
            "snapshot_every": self.snapshot_every,
            "params": self.params,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build a config from a (possibly partial) dict on top of the experiment defaults."""
        experiment = Experiment(data.get("experiment", "custom"))
        merged = default_config(experiment).to_dict()
        for key, value in data.items():
            if isinstance(value, dict) and isinstance(merged.get(key), dict):
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
        kernel = KernelSpec.from_dict(merged["kernel"])
        method = merged["method"]
        if isinstance(method, str):
            method = {"method": method}
        method = {**{"noise_seed": 0}, **method}
        return cls(
            experiment=experiment,
            method=MethodSpec(Method(method["method"]), kernel, int(method["noise_seed"])),
            kernel=kernel,
            J=int(merged["J"]),
            grid=TimeGrid(float(merged["grid"]["t_end"]), float(merged["grid"]["step"])),
            seed=int(merged["seed"]),
            prior=Prior.from_dict(merged["prior"]),
            output_dir=Path(merged["output_dir"]),
            snapshot_every=int(merged["snapshot_every"]),
            params=dict(merged.get("params") or {}),
        )

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_config(experiment: Experiment | str, output_dir="lwek_out") -> RunConfig:
    experiment = Experiment(experiment)
    gauss = KernelSpec.gaussian
    if experiment is Experiment.APPROX_SINE:
        return RunConfig(experiment, MethodSpec(Method.LWEKI, gauss(1.0)), gauss(1.0), 100,
                         TimeGrid(1.0, 1.0), 0, Prior.uniform_box([[-3.0, 3.0]]), output_dir,
                         params={"bandwidths": [5.0, 1.0, 0.2], "anchor": math.pi / 4,
                                 "plot_halfwidth": 3.0, "n_plot": 601})
    if experiment is Experiment.APPROX_HIMMELBLAU:
        return RunConfig(experiment, MethodSpec(Method.LWEKI, gauss(1.0)), gauss(1.0), 100,
                         TimeGrid(1.0, 1.0), 0, Prior.gaussian(2, 2.0), output_dir,
                         params={"bandwidths": [1.0, 5.0], "anchor_index": 0,
                                 "plot_box": [[-6.0, 6.0], [-6.0, 6.0]], "n_plot": 101})
    if experiment is Experiment.INVERT_HIMMELBLAU:
        return RunConfig(experiment, MethodSpec(Method.LWEKI, gauss(1.0)), gauss(1.0), 100,
                         TimeGrid(10.0, 1e-3), 0, Prior.gaussian(2, 1.5), output_dir,
                         snapshot_every=1000,
                         params={"data": [11.0, 7.0], "radius": 0.5, "min_count": 5,
                                 "compare_method": "eki"})
    if experiment is Experiment.ENSRF_1D:
        return RunConfig(experiment, MethodSpec(Method.LWENSRF, gauss(0.1)), gauss(0.1), 1000,
                         TimeGrid(3.0, 1e-3), 0, Prior.gaussian(1, 1.0), output_dir,
                         snapshot_every=500,
                         params={"data": 1.0, "noise_var": 1.0, "compare_method": "ensrf",
                                 "snapshot_times": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
                                 "kde_grid": [-6.0, 4.0, 2001]})
    if experiment is Experiment.SHELL_10D:
        return RunConfig(experiment, MethodSpec(Method.LWEKI, gauss(2.0)), gauss(2.0), 500,
                         TimeGrid(10.0, 1e-3), 0, Prior.gaussian(10, 2.0), output_dir,
                         snapshot_every=100,
                         params={"data": 45.0, "stop_window": 100, "stop_rel_change": 1e-3,
                                 "compare_method": "eki", "norm_grid": [0.05, 12.0, 2400],
                                 "hist_bins": 60})
    return RunConfig(experiment, MethodSpec(Method.EKI, gauss(1.0)), gauss(1.0), 100,
                     TimeGrid(1.0, 1e-3), 0, Prior.gaussian(1, 1.0), output_dir,
                     params={"forward": "square", "data": [1.0]})


# ---------------------------------------------------------------- manifest

@dataclass
class RunManifest:
    config: dict
    figure: str
    status: str = "running"
    failure: str | None = None
    timings: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(_jsonable(self.to_dict()), indent=2, sort_keys=True) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    return obj


class _Context:
    """Bookkeeping shared by the runners: output files, timings and flags."""

    def __init__(self, config: RunConfig, manifest: RunManifest):
        self.config = config
        self.manifest = manifest
        self.out = config.output_dir

    def write_csv(self, name: str, header: list[str], table) -> Path:
        path = self.out / name
        path.write_text(format_csv(header, np.asarray(table, dtype=float)), newline="\n")
        self.manifest.files.append(name)
        return path

    def write_ensemble(self, name: str, ensemble: Ensemble) -> Path:
        path = self.out / name
        ensemble.to_csv(path)
        self.manifest.files.append(name)
        return path

    def phase(self, name: str):
        ctx = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                ctx.manifest.timings[name] = time.perf_counter() - self.t0
                return False

        return _Timer()

    def flag(self, name: str, value=True):
        self.manifest.flags[name] = value


def _rng(config: RunConfig) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(config.seed) % 2**64))


def _method_spec(name: str, config: RunConfig) -> MethodSpec:
    return MethodSpec(Method(name), config.kernel, config.method.noise_seed)


def _integrate_logged(ctx: _Context, problem: ForwardProblem, spec: MethodSpec, grid: TimeGrid,
                      initial: Ensemble, label: str, **kwargs):
    try:
        with ctx.phase(f"integrate_{label}"):
            return integrate(problem, spec, grid, initial, **kwargs)
    except IntegrationError as err:
        ctx.write_ensemble(f"{label}_last_finite.csv", err.last_finite)
        ctx.flag(f"{label}_nonfinite_abort", {"step": err.step, "time": err.time})
        raise


def _write_trajectory(ctx: _Context, label: str, traj) -> list[dict]:
    entries = []
    for t, snap in zip(traj.times, traj.snapshots):
        name = f"{label}_t{t:.4f}.csv"
        ctx.write_ensemble(name, snap)
        entries.append({"time": t, "file": name})
    return entries


# ---------------------------------------------------------------- runners

def _approx_sine(ctx: _Context) -> dict:
    cfg = ctx.config
    x = np.array([float(cfg.params.get("anchor", math.pi / 4))])
    ens = Ensemble(cfg.prior.sample(_rng(cfg), cfg.J)).evaluate(sine)
    half = float(cfg.params.get("plot_halfwidth", 3.0))
    xi = np.linspace(x[0] - half, x[0] + half, int(cfg.params.get("n_plot", 601)))[:, None]
    results = {}
    for r in cfg.params.get("bandwidths", [cfg.kernel.bandwidth]):
        kernel = KernelSpec(cfg.kernel.kind, float(r), cfg.kernel.truncation_radius)
        lm = local_moments(kernel, ens, x)
        models = {
            "A_x": build_model(kernel, ens, x, 1, ModelVariant.LEAST_SQUARES),
            "At_x": build_model(kernel, ens, x, 1, ModelVariant.ANCHORED, forward=sine),
            "A2_x": build_model(kernel, ens, x, 2, ModelVariant.LEAST_SQUARES),
            "At2_x": build_model(kernel, ens, x, 2, ModelVariant.ANCHORED, forward=sine),
        }
        cols = [xi[:, 0], np.sin(xi[:, 0])] + [m(xi)[:, 0] for m in models.values()]
        ctx.write_csv(f"approx_sine_r{r:g}_curves.csv", ["xi", "A"] + list(models), np.column_stack(cols))
        ctx.write_csv(f"approx_sine_r{r:g}_particles.csv", ["u", "A", "weight"],
                      np.column_stack([ens.particles[:, 0], ens.features[:, 0], lm.weights.weights]))
        near = np.linspace(x[0] - 0.2, x[0] + 0.2, 401)[:, None]
        results[f"r={r:g}"] = {
            "mu_kappa": lm.mu[0],
            "d_kappa": models["A_x"].jacobian.matrix[0, 0],
            "d2_kappa": models["A2_x"].bilinear.tensor[0, 0, 0],
            "max_err_A_x_near_anchor": float(np.max(np.abs(models["A_x"](near)[:, 0] - np.sin(near[:, 0])))),
        }
    return results


def _approx_himmelblau(ctx: _Context) -> dict:
    cfg = ctx.config
    ens = Ensemble(cfg.prior.sample(_rng(cfg), cfg.J)).evaluate(himmelblau)
    x = ens.particles[int(cfg.params.get("anchor_index", 0))]
    box = np.asarray(cfg.params.get("plot_box", [[-6, 6], [-6, 6]]), dtype=float)
    n = int(cfg.params.get("n_plot", 101))
    g1, g2 = np.meshgrid(np.linspace(*box[0], n), np.linspace(*box[1], n), indexing="ij")
    pts = np.column_stack([g1.ravel(), g2.ravel()])
    results = {"anchor": x}
    for r in cfg.params.get("bandwidths", [cfg.kernel.bandwidth]):
        kernel = KernelSpec(cfg.kernel.kind, float(r), cfg.kernel.truncation_radius)
        lm = local_moments(kernel, ens, x)
        m1 = build_model(kernel, ens, x, 1)
        m2 = build_model(kernel, ens, x, 2)
        mu = lm.mu
        h = pts - mu
        taylor = (himmelblau(mu[None])[0, 0] + h @ himmelblau_gradient(mu)
                  + 0.5 * np.einsum("nl,lm,nm->n", h, himmelblau_hessian(mu), h))
        table = np.column_stack([pts, himmelblau(pts)[:, 0], taylor, m1(pts)[:, 0], m2(pts)[:, 0]])
        ctx.write_csv(f"approx_himmelblau_r{r:g}_grid.csv", ["x1", "x2", "A", "taylor2", "A_x", "A2_x"], table)
        ctx.write_csv(f"approx_himmelblau_r{r:g}_particles.csv", ["x1", "x2", "weight"],
                      np.column_stack([ens.particles, lm.weights.weights]))
        results[f"r={r:g}"] = {"mu_kappa": mu, "d_kappa": m1.jacobian.matrix[0],
                               "d2_kappa": m2.bilinear.tensor[0],
                               "exact_gradient_at_mu": himmelblau_gradient(mu),
                               "exact_hessian_at_mu": himmelblau_hessian(mu)}
    return results


def _invert_himmelblau(ctx: _Context) -> dict:
    cfg = ctx.config
    problem = ForwardProblem(himmelblau_map, cfg.params.get("data", [11.0, 7.0]), himmelblau_map_jacobian)
    initial = Ensemble(cfg.prior.sample(_rng(cfg), cfg.J))
    roots = himmelblau_roots()
    radius = float(cfg.params.get("radius", 0.5))
    min_count = int(cfg.params.get("min_count", 5))
    ctx.write_csv("himmelblau_roots.csv", ["x1", "x2"], roots)
    results = {"roots": roots}
    labels = [cfg.method.method.value]
    compare = cfg.params.get("compare_method")
    if compare and compare != labels[0]:
        labels.append(compare)
    for label in labels:
        spec = _method_spec(label, cfg)
        traj = _integrate_logged(ctx, problem, spec, cfg.grid, initial, label,
                                 snapshot_every=cfg.snapshot_every)
        counts = root_assignment(traj.final, roots, radius)
        results[label] = {
            "snapshots": _write_trajectory(ctx, label, traj),
            "root_counts": counts,
            "roots_covered": int(np.sum(counts >= min_count)),
            "final_mean_misfit": float(np.mean(problem.misfit(traj.final.particles))),
        }
    return results


def _ensrf_1d(ctx: _Context) -> dict:
    cfg = ctx.config
    y = float(cfg.params.get("data", 1.0))
    noise_var = float(cfg.params.get("noise_var", 1.0))
    scale = 1.0 / math.sqrt(noise_var)
    # whitening turns N(0, noise_var) observation noise into the unit-noise setting
    problem = ForwardProblem(lambda U: scale * quadratic_1d(U), [scale * y])
    lo, hi, n = cfg.params.get("kde_grid", [-6.0, 4.0, 2001])
    grid = np.linspace(float(lo), float(hi), int(n))
    post = posterior_1d_bimodal(grid, y, noise_var)
    post.to_csv(ctx.out / "posterior.csv")
    ctx.manifest.files.append("posterior.csv")
    times = [float(t) for t in cfg.params.get("snapshot_times", [])]
    initial = Ensemble(cfg.prior.sample(_rng(cfg), cfg.J))
    results = {"posterior_modes": post.modes(MODE_REL_HEIGHT)}
    labels = [cfg.method.method.value]
    compare = cfg.params.get("compare_method")
    if compare and compare != labels[0]:
        labels.append(compare)
    for label in labels:
        spec = _method_spec(label, cfg)
        traj = _integrate_logged(ctx, problem, spec, cfg.grid, initial, label,
                                 snapshot_every=cfg.snapshot_every, snapshot_times=times)
        rows = []
        for t, snap in zip(traj.times, traj.snapshots):
            if times and not any(abs(t - s) < 0.5 * cfg.grid.step for s in times):
                continue
            curve = kde(snap.particles[:, 0], grid)
            name = f"kde_{label}_t{t:.4f}.csv"
            curve.to_csv(ctx.out / name)
            ctx.manifest.files.append(name)
            ctx.write_ensemble(f"{label}_t{t:.4f}.csv", snap)
            rows.append({"time": t, "l1": curve.l1_distance(post), "modes": curve.modes(MODE_REL_HEIGHT)})
        best = min(rows, key=lambda row: row["l1"])
        results[label] = {"snapshots": rows, "best": best}
    return results


def _shell_10d(ctx: _Context) -> dict:
    cfg = ctx.config
    y = float(cfg.params.get("data", 45.0))
    problem = ForwardProblem(norm_squared, [y])
    initial = Ensemble(cfg.prior.sample(_rng(cfg), cfg.J))
    window = int(cfg.params.get("stop_window", 100))
    rel_change = float(cfg.params.get("stop_rel_change", 1e-3))
    history: list[float] = []

    def stabilised(k: int, ens: Ensemble) -> bool:
        history.append(float(np.mean(np.linalg.norm(ens.particles, axis=1))))
        if len(history) <= window:
            return False
        old = history[-1 - window]
        return abs(history[-1] - old) < rel_change * abs(old)

    lo, hi, n = cfg.params.get("norm_grid", [0.05, 12.0, 2400])
    zgrid = np.linspace(float(lo), float(hi), int(n))
    sigma = cfg.prior.sigma
    push = posterior_shell_pushforward(zgrid, sigma, cfg.prior.dim, y)
    push.to_csv(ctx.out / "shell_pushforward.csv")
    ctx.manifest.files.append("shell_pushforward.csv")
    bins = np.linspace(float(lo), float(hi), int(cfg.params.get("hist_bins", 60)) + 1)
    initial_norm = float(np.mean(np.linalg.norm(initial.particles, axis=1)))
    results = {"initial_mean_norm": initial_norm, "pushforward_mode": push.mode}

    spec = cfg.method
    traj = _integrate_logged(ctx, problem, spec, cfg.grid, initial, spec.method.value,
                             snapshot_every=cfg.snapshot_every, stop=stabilised)
    t_stop = traj.times[-1]
    runs = [(spec.method.value, traj)]
    compare = cfg.params.get("compare_method")
    if compare and compare != spec.method.value:
        steps = traj.n_steps
        grid = TimeGrid(steps * cfg.grid.step, cfg.grid.step)
        runs.append((compare, _integrate_logged(ctx, problem, _method_spec(compare, cfg), grid, initial,
                                                compare, snapshot_every=cfg.snapshot_every)))
    for label, tr in runs:
        norms = np.linalg.norm(tr.final.particles, axis=1)
        hist, _ = np.histogram(norms, bins=bins, density=True)
        ctx.write_csv(f"norm_hist_{label}.csv", ["bin_left", "bin_right", "density"],
                      np.column_stack([bins[:-1], bins[1:], hist]))
        ctx.write_ensemble(f"{label}_final.csv", tr.final)
        series = np.array([[t, np.mean(np.linalg.norm(s.particles, axis=1))]
                           for t, s in zip(tr.times, tr.snapshots)])
        ctx.write_csv(f"mean_norm_{label}.csv", ["time", "mean_norm"], series)
        results[label] = {
            "t_final": tr.times[-1],
            "mean_norm": float(norms.mean()),
            "displacement": float(norms.mean() - initial_norm),
            "fraction_in_6_7.5": float(np.mean((norms >= 6.0) & (norms <= 7.5))),
        }
    results["t_stop"] = t_stop
    results["stopped_by_criterion"] = traj.stopped_early
    return results


def _custom(ctx: _Context) -> dict:
    cfg = ctx.config
    name = cfg.params.get("forward", "square")
    if name == "linear":
        M = np.atleast_2d(np.asarray(cfg.params["matrix"], dtype=float))
        forward = lambda U: np.atleast_2d(U) @ M.T  # noqa: E731
    elif name in FORWARD_MAPS:
        forward = FORWARD_MAPS[name]
    else:
        raise ValueError(f"unknown forward map {name!r}; choose from {sorted(FORWARD_MAPS)} or 'linear'")
    problem = ForwardProblem(forward, cfg.params.get("data", [0.0]))
    initial = Ensemble(cfg.prior.sample(_rng(cfg), cfg.J))
    traj = _integrate_logged(ctx, problem, cfg.method, cfg.grid, initial, cfg.method.method.value,
                             snapshot_every=cfg.snapshot_every)
    return {"snapshots": _write_trajectory(ctx, cfg.method.method.value, traj),
            "final_mean_misfit": float(np.mean(problem.misfit(traj.final.particles)))}


RUNNERS = {
    Experiment.APPROX_SINE: _approx_sine,
    Experiment.APPROX_HIMMELBLAU: _approx_himmelblau,
    Experiment.INVERT_HIMMELBLAU: _invert_himmelblau,
    Experiment.ENSRF_1D: _ensrf_1d,
    Experiment.SHELL_10D: _shell_10d,
    Experiment.CUSTOM: _custom,
}


def run(config: RunConfig) -> RunManifest:
    """Run one experiment; the manifest is written even when the run fails."""
    config.output_dir.mkdir(parents=True, exist_ok=True)
    probe = config.output_dir / ".write_test"
    probe.write_text("")
    probe.unlink()
    manifest = RunManifest(config.to_dict(), FIGURES[config.experiment])
    ctx = _Context(config, manifest)
    try:
        with ctx.phase("total"):
            manifest.results = RUNNERS[config.experiment](ctx)
        manifest.status = "ok"
    except Exception as err:  # recorded in the manifest, then re-raised
        manifest.status = "failed"
        manifest.failure = f"{type(err).__name__}: {err}"
        manifest.flags.setdefault("traceback", traceback.format_exc(limit=5))
        raise
    finally:
        manifest.write(config.output_dir / "manifest.json")
    return manifest
