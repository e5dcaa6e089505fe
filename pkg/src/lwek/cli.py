"""Command line entry point ``lwek``.

Subcommands:

``run``     run an experiment from a JSON config with flag overrides
``approx``  evaluate local approximations of a registered map at one anchor
``oracle``  write quadrature and reference curves as CSV
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .experiments import FORWARD_MAPS, Experiment, RunConfig, run
from .kernels import KernelSpec
from .local_approx import d2_kappa, d_kappa
from .moments import Ensemble, format_csv, local_moments
from .oracles import (
    QuadratureMeasure,
    mf_d_kappa,
    posterior_1d_bimodal,
    posterior_shell_pushforward,
    statistical_linearization,
)

log = logging.getLogger("lwek")


def _thread_limit():
    value = os.environ.get("LWEK_THREADS")
    if not value:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    n = int(value)
    if n < 1:
        raise SystemExit("LWEK_THREADS must be a positive integer")
    return threadpool_limits(limits=n)


def _overrides(args) -> dict:
    out: dict = {}
    if args.experiment:
        out["experiment"] = args.experiment
    if args.method:
        out["method"] = {"method": args.method}
    if args.bandwidth is not None:
        out["kernel"] = {"bandwidth": args.bandwidth}
    if args.ensemble_size is not None:
        out["J"] = args.ensemble_size
    if args.seed is not None:
        out["seed"] = args.seed
    grid = {}
    if args.t_end is not None:
        grid["t_end"] = args.t_end
    if args.step is not None:
        grid["step"] = args.step
    if grid:
        out["grid"] = grid
    if args.output_dir:
        out["output_dir"] = args.output_dir
    if args.snapshot_every is not None:
        out["snapshot_every"] = args.snapshot_every
    return out


def build_config(args) -> RunConfig:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if not isinstance(data, dict):
        raise ValueError("config file must contain a JSON object")
    over = _overrides(args)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(data.get(key), dict):
            data[key] = {**data[key], **value}
        elif isinstance(value, dict) and isinstance(data.get(key), str) and key == "method":
            data[key] = value
        else:
            data[key] = value
    if "experiment" not in data:
        raise ValueError("experiment must be given in the config or with --experiment")
    return RunConfig.from_dict(data)


def cmd_run(args) -> int:
    config = build_config(args)
    manifest = run(config)
    print(json.dumps({"status": manifest.status, "output_dir": str(config.output_dir),
                      "figure": manifest.figure}))
    return 0


def cmd_approx(args) -> int:
    forward = FORWARD_MAPS[args.function]
    x = np.asarray(args.anchor, dtype=float)
    rng = np.random.default_rng(args.seed)
    lo, hi = args.box
    ens = Ensemble(lo + (hi - lo) * rng.random((args.ensemble_size, x.size))).evaluate(forward)
    kernel = KernelSpec.gaussian(args.bandwidth)
    lm = local_moments(kernel, ens, x)
    jac = d_kappa(kernel, ens, x)
    hess = d2_kappa(kernel, ens, x)
    result = {"anchor": x.tolist(), "mu_kappa": lm.mu.tolist(), "mu_A_kappa": lm.mu_A.tolist(),
              "d_kappa": jac.matrix.tolist(), "d2_kappa": hess.tensor.tolist(),
              "rank_deficient": bool(jac.rank_deficient), "underflow": bool(jac.underflow)}
    text = json.dumps(result, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_oracle(args) -> int:
    lo, hi = args.range
    if args.curve == "posterior-1d":
        grid = np.linspace(lo, hi, args.n)
        curve = posterior_1d_bimodal(grid, args.data, args.noise_var)
        text = format_csv(["x", "density"], np.column_stack([curve.grid, curve.values]))
    elif args.curve == "shell":
        # the norm density lives on (0, inf)
        grid = np.linspace(lo if lo > 0 else hi / args.n, hi, args.n)
        curve = posterior_shell_pushforward(grid, args.sigma, args.dim, args.data)
        text = format_csv(["norm", "density"], np.column_stack([curve.grid, curve.values]))
    else:
        # D_kappa of sin at the anchor under the uniform measure on the box, per bandwidth
        measure = QuadratureMeasure.uniform([[lo, hi]])
        x = np.array([args.anchor])
        rows = []
        for r in args.bandwidths:
            value = mf_d_kappa(KernelSpec.gaussian(r), measure, np.sin, x).matrix[0, 0]
            rows.append([r, value, abs(value - np.cos(x[0]))])
        lin = statistical_linearization(measure, np.sin)[0, 0]
        rows.append([np.inf, lin, abs(lin - np.cos(x[0]))])
        text = format_csv(["r", "mf_d_kappa", "abs_err_vs_cos"], np.asarray(rows))
    if args.output:
        Path(args.output).write_text(text, newline="\n")
    else:
        sys.stdout.write(text)
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lwek", description="Locally weighted ensemble Kalman methods.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment")
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--experiment", choices=[e.value for e in Experiment])
    p.add_argument("--method", choices=["eki", "lweki", "ensrf", "lwensrf", "stochastic_enkf"])
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--ensemble-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--t-end", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--snapshot-every", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("approx", help="local derivative approximations at one anchor")
    p.add_argument("--function", choices=sorted(FORWARD_MAPS), default="sine")
    p.add_argument("--anchor", type=float, nargs="+", default=[float(np.pi / 4)])
    p.add_argument("--bandwidth", type=float, default=1.0)
    p.add_argument("--ensemble-size", type=int, default=100)
    p.add_argument("--box", type=float, nargs=2, default=[-3.0, 3.0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_approx)

    p = sub.add_parser("oracle", help="reference curves")
    p.add_argument("curve", choices=["posterior-1d", "shell", "mf-sine"])
    p.add_argument("--range", type=float, nargs=2, default=[-6.0, 4.0])
    p.add_argument("--n", type=int, default=2001)
    p.add_argument("--data", type=float, default=1.0)
    p.add_argument("--noise-var", type=float, default=1.0)
    p.add_argument("--sigma", type=float, default=2.0)
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--anchor", type=float, default=float(np.pi / 4))
    p.add_argument("--bandwidths", type=float, nargs="+", default=[0.4, 0.2, 0.1, 0.05])
    p.add_argument("--output")
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except (ValueError, OSError) as err:
        log.error("%s", err)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
