"""Command line front end.

One verb per activity: ``phantom`` rasterizes the coefficient,
``forward`` synthesizes (noisy) data, ``landweber`` and ``rbl`` run a
single reconstruction, ``compare`` runs both on the same data and
reports the comparison, ``sweep`` repeats the accelerated run over a
list of noise levels.  Exit codes: 0 success, 2 invalid configuration,
3 solver failure.
"""

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .experiment import (ExperimentConfig, noise_sweep, run_experiment,
                         synthesize_measurement, write_grid)
from .fem import SolverFailure, make_grid, make_partition
from .phantom import rasterize_phantom

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3


def _add_common(parser):
    parser.add_argument("--config", help="JSON file with config fields "
                        "(command line flags override it)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="master seed (noise and "
                        "power iteration)")
    parser.add_argument("--n", type=int, help="interior nodes per direction")
    parser.add_argument("--q", type=int, help="partition subdivisions per direction")
    parser.add_argument("--noise", type=float, help="relative noise level")
    parser.add_argument("--tau", type=float, help="discrepancy factor (> 2)")
    parser.add_argument("--omega", help="damping factor or 'auto'")
    parser.add_argument("--sigma-start", type=float, dest="sigma_start",
                        help="constant starting coefficient")
    parser.add_argument("--setting", choices=("full", "partial"))
    parser.add_argument("--region", help="partial measurement rectangle "
                        "x0,x1,y0,y1")
    parser.add_argument("--refine", type=int, help="data grid refinement factor")
    parser.add_argument("--solver-tol", type=float, dest="solver_tol")
    parser.add_argument("--max-outer", type=int, dest="max_outer")
    parser.add_argument("--max-inner", type=int, dest="max_inner")
    parser.add_argument("--max-total", type=int, dest="max_total")
    parser.add_argument("--positivity-floor", type=float, dest="positivity_floor")
    parser.add_argument("--clamp-policy", choices=("abort", "clamp"),
                        dest="clamp_policy")
    parser.add_argument("--opnorm-iters", type=int, dest="opnorm_iters")
    parser.add_argument("--probe", action="store_true", default=None,
                        help="record full-order update errors per inner "
                        "iteration (expensive)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="condinv",
        description="Reconstruct a piecewise constant diffusion coefficient "
                    "from interior measurements.",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, desc in (
        ("phantom", "rasterize the phantom coefficient onto the partition"),
        ("forward", "synthesize (noisy) measurement data"),
        ("landweber", "run the full-order Landweber reconstruction"),
        ("rbl", "run the reduced-basis accelerated reconstruction"),
        ("compare", "run both reconstructions on identical data"),
        ("sweep", "run the accelerated reconstruction per noise level"),
    ):
        p = sub.add_parser(verb, help=desc)
        _add_common(p)
        if verb == "sweep":
            p.add_argument("--levels", default="0.04,0.02,0.01",
                           help="comma separated noise levels")
    return parser


def _load_config(args):
    data = {}
    if args.config:
        with open(args.config) as fh:
            data.update(json.load(fh))
    cfg = ExperimentConfig.from_dict(data)
    overrides = {}
    for name in ("seed", "n", "q", "noise", "tau", "sigma_start", "setting",
                 "refine", "solver_tol", "max_outer", "max_inner", "max_total",
                 "positivity_floor", "clamp_policy", "opnorm_iters", "probe",
                 "out"):
        val = getattr(args, name, None)
        if val is not None:
            overrides[name] = val
    if args.omega is not None:
        overrides["omega"] = args.omega if args.omega == "auto" else float(args.omega)
    if args.region is not None:
        parts = [float(v) for v in args.region.split(",")]
        if len(parts) != 4:
            raise ValueError(f"region needs 4 values x0,x1,y0,y1, got {args.region!r}")
        overrides["region"] = tuple(parts)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg


def _cmd_phantom(cfg):
    partition = make_partition(make_grid(cfg.n), cfg.q)
    values = rasterize_phantom(cfg.phantom, partition)
    print(f"phantom on {cfg.q}x{cfg.q} partition: "
          f"min {values.min():g}, max {values.max():g}")
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        write_grid(os.path.join(cfg.out, "sigma_true.csv"), values,
                   cfg.q, cfg.setting)
    return EXIT_OK


def _cmd_forward(cfg):
    meas, u_exact = synthesize_measurement(cfg)
    print(f"synthesized data: n={cfg.n}, noise={cfg.noise:g}, "
          f"delta={meas.delta:.6e}")
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        write_grid(os.path.join(cfg.out, "u_exact.csv"), u_exact,
                   cfg.n, cfg.setting)
        write_grid(os.path.join(cfg.out, "u_delta.csv"), meas.u_delta,
                   cfg.n, cfg.setting)
        with open(os.path.join(cfg.out, "measurement.json"), "w") as fh:
            json.dump({"delta": meas.delta, "noise": cfg.noise,
                       "setting": cfg.setting, "seed": cfg.seed},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _print_run(summary, algorithms):
    for alg in algorithms:
        entry = summary.get(alg, {})
        if entry.get("status") != "ok":
            print(f"{alg}: FAILED ({entry.get('error')})")
            continue
        its = entry.get("iterations", entry.get("outer_iterations"))
        print(f"{alg}: converged={entry['converged']} iterations={its} "
              f"solves={entry['forward_solves']} "
              f"residual={entry['final_residual']:.4e} "
              f"error={entry['sigma_error_true']:.4e} "
              f"time={entry['time_s']:.2f}s")
    comp = summary.get("comparison")
    if comp:
        print(f"comparison: |sigma_rbl - sigma_lw| = {comp['sigma_diff_l2']:.4e}, "
              f"speed-up x{comp['speed_up']:.1f}")


def _cmd_run(cfg, algorithms):
    summary = run_experiment(cfg, algorithms=algorithms)
    _print_run(summary, algorithms)
    return EXIT_OK if summary["status"] == "ok" else EXIT_SOLVER


def _cmd_sweep(cfg, levels_arg):
    levels = [float(v) for v in levels_arg.split(",") if v.strip() != ""]
    report = noise_sweep(cfg, levels)
    failed = False
    for entry in report["levels"]:
        if entry["status"] == "ok":
            print(f"noise {entry['noise']:g}: delta={entry['delta']:.4e} "
                  f"error={entry['sigma_error']:.4e} "
                  f"converged={entry['converged']}")
        else:
            failed = True
            print(f"noise {entry['noise']:g}: FAILED ({entry.get('error')})")
    return EXIT_SOLVER if failed else EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.verb == "phantom":
            return _cmd_phantom(cfg)
        if args.verb == "forward":
            return _cmd_forward(cfg)
        if args.verb == "landweber":
            return _cmd_run(cfg, ("landweber",))
        if args.verb == "rbl":
            return _cmd_run(cfg, ("rbl",))
        if args.verb == "compare":
            return _cmd_run(cfg, ("landweber", "rbl"))
        if args.verb == "sweep":
            return _cmd_sweep(cfg, args.levels)
        raise AssertionError(f"unhandled verb {args.verb}")
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverFailure as exc:
        print(f"error: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
