"""Experiment orchestration: data synthesis, runs, reports, file output.

Synthetic data is always generated on a refined grid (factor >= 2) and
restricted to the coarse nodes by nodal evaluation, so the inversion
never sees data from its own discretization.  Noise is uniform i.i.d.
per node, rescaled to a prescribed fraction of the data norm; the noise
level delta handed to the solvers is the exact norm of the added
perturbation.
"""

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .fem import (SolverFailure, assemble_components, l2_norm, make_grid,
                  make_partition, parameter_l2_norm)
from .forward import ForwardCache, forward
from .phantom import PhantomSpec, rasterize_phantom
from .solvers import Measurement, SolverConfig, landweber, rbl

__all__ = [
    "ExperimentConfig",
    "measurement_mask",
    "synthesize_measurement",
    "run_experiment",
    "noise_sweep",
    "write_grid",
    "read_grid",
]


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce one reconstruction experiment."""

    n: int = 49
    q: int = 10
    phantom: PhantomSpec = field(default_factory=PhantomSpec.default)
    sigma_start: float = 3.0
    noise: float = 0.01
    seed: int = 0
    tau: float = 2.5
    omega: object = "auto"
    setting: str = "full"
    region: tuple = (0.0, 1.0, 0.0, 0.5)
    refine: int = 2
    solver_tol: float = 1e-12
    max_outer: int = 200
    max_inner: int = 1_000_000
    max_total: int = 10_000_000
    positivity_floor: float = 1e-8
    clamp_policy: str = "abort"
    opnorm_iters: int = 50
    probe: bool = False
    out: str = None

    def validate(self):
        make_partition(make_grid(self.n), self.q)
        if self.sigma_start <= 0.0:
            raise ValueError(f"sigma_start must be > 0, got {self.sigma_start}")
        if self.noise < 0.0:
            raise ValueError(f"noise level must be >= 0, got {self.noise}")
        if not isinstance(self.refine, (int, np.integer)) or self.refine < 2:
            raise ValueError(
                f"refinement factor must be an integer >= 2, got {self.refine!r}"
            )
        if self.setting not in ("full", "partial"):
            raise ValueError(f"setting must be 'full' or 'partial', got {self.setting!r}")
        x0, x1, y0, y1 = self.region
        if not (0.0 <= x0 < x1 <= 1.0 and 0.0 <= y0 < y1 <= 1.0):
            raise ValueError(f"measurement region {self.region} is not a valid "
                             "sub-rectangle of the unit square")
        self.solver_config()
        return self

    def solver_config(self):
        return SolverConfig(
            tau=self.tau, omega=self.omega, max_outer=self.max_outer,
            max_inner=self.max_inner, max_total=self.max_total,
            solver_tol=self.solver_tol, positivity_floor=self.positivity_floor,
            clamp_policy=self.clamp_policy, opnorm_iters=self.opnorm_iters,
            seed=self.seed, probe=self.probe,
        ).validate()

    def to_dict(self):
        data = {
            "n": self.n, "q": self.q, "phantom": self.phantom.to_dict(),
            "sigma_start": self.sigma_start, "noise": self.noise,
            "seed": self.seed, "tau": self.tau, "omega": self.omega,
            "setting": self.setting, "region": list(self.region),
            "refine": self.refine, "solver_tol": self.solver_tol,
            "max_outer": self.max_outer, "max_inner": self.max_inner,
            "max_total": self.max_total,
            "positivity_floor": self.positivity_floor,
            "clamp_policy": self.clamp_policy,
            "opnorm_iters": self.opnorm_iters, "probe": self.probe,
        }
        return data

    @staticmethod
    def from_dict(data):
        data = dict(data)
        data.pop("out", None)
        if "phantom" in data:
            data["phantom"] = PhantomSpec.from_dict(data["phantom"])
        if "region" in data:
            data["region"] = tuple(data["region"])
        known = {f for f in ExperimentConfig.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return ExperimentConfig(**data)


def measurement_mask(grid, region):
    """Boolean mask of interior nodes inside the closed region rectangle."""
    x, y = grid.interior_coordinates()
    x0, x1, y0, y1 = region
    mask = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    if not mask.any():
        raise ValueError(f"measurement region {region} contains no grid nodes")
    return mask


def synthesize_measurement(cfg, cs=None):
    """Generate noisy synthetic data for the configured phantom.

    Returns (Measurement, u_exact) where u_exact holds the coarse nodal
    values of the refined-grid solution (before noise, unmasked).  The
    perturbation is seeded and fully determined by cfg.seed.
    """
    cfg.validate()
    grid = make_grid(cfg.n)
    partition = make_partition(grid, cfg.q)
    if cs is None:
        cs = assemble_components(grid, partition)
    sigma_true = rasterize_phantom(cfg.phantom, partition)

    # exact data on the refined twin of the grid; the coarse nodes are a
    # subset of the fine nodes, so restriction is nodal evaluation
    n_f = cfg.refine * (cfg.n + 1) - 1
    grid_f = make_grid(n_f)
    partition_f = make_partition(grid_f, cfg.q)
    cs_f = assemble_components(grid_f, partition_f)
    u_f = forward(ForwardCache(cs_f, cfg.solver_tol), sigma_true)
    i = np.arange(cfg.n)
    fine_idx = cfg.refine * (i + 1) - 1
    u_exact = u_f.reshape(n_f, n_f)[np.ix_(fine_idx, fine_idx)].ravel()

    mask = None if cfg.setting == "full" else measurement_mask(grid, cfg.region)
    data = u_exact if mask is None else np.where(mask, u_exact, 0.0)

    if cfg.noise > 0.0:
        rng = np.random.default_rng(cfg.seed)
        xi = rng.uniform(-1.0, 1.0, cs.dim)
        if mask is not None:
            xi = np.where(mask, xi, 0.0)
        xi_norm = l2_norm(cs, xi)
        scale = cfg.noise * l2_norm(cs, data) / xi_norm
        perturbation = scale * xi
        u_delta = data + perturbation
        delta = l2_norm(cs, perturbation)
    else:
        u_delta = data.copy()
        delta = 0.0
    return Measurement(u_delta, delta, mask=mask), u_exact


def write_grid(path, values, side, setting):
    """Write a value grid as CSV: two header lines (n, setting), then
    ``side`` rows of ``side`` full-precision values, row-major."""
    values = np.asarray(values, dtype=float).reshape(side, side)
    with open(path, "w") as fh:
        fh.write(f"n,{side}\n")
        fh.write(f"setting,{setting}\n")
        for row in values:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_grid(path):
    """Inverse of ``write_grid``; returns (values, side, setting)."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    side = int(lines[0].split(",")[1])
    setting = lines[1].split(",")[1]
    values = np.array([[float(v) for v in line.split(",")]
                       for line in lines[2:2 + side]])
    return values.ravel(), side, setting


def _near_far_errors(partition, region, sigma, sigma_true):
    """Mean absolute coefficient error over subdomains whose center lies
    inside the measurement region vs. the others (qualitative report)."""
    cx, cy = partition.centers()
    x0, x1, y0, y1 = region
    near = (cx >= x0) & (cx <= x1) & (cy >= y0) & (cy <= y1)
    err = np.abs(sigma - sigma_true)
    out = {}
    if near.any():
        out["near_error"] = float(err[near].mean())
    if (~near).any():
        out["far_error"] = float(err[~near].mean())
    return out


def run_experiment(cfg, algorithms=("landweber", "rbl")):
    """Run the configured reconstruction(s) and assemble the report.

    Returns the summary dict; with cfg.out set, also writes summary.json,
    per-algorithm traces and reconstruction grids, the phantom grid and
    the (noisy) data grid.  A solver failure is recorded per algorithm
    instead of propagating, and flips the overall status to "failed".
    """
    cfg.validate()
    grid = make_grid(cfg.n)
    partition = make_partition(grid, cfg.q)
    cs = assemble_components(grid, partition)
    sigma_true = rasterize_phantom(cfg.phantom, partition)
    meas, u_exact = synthesize_measurement(cfg, cs)
    sigma_start = np.full(partition.p, float(cfg.sigma_start))
    solver_cfg = cfg.solver_config()

    summary = {
        "config": cfg.to_dict(),
        "setting": cfg.setting,
        "delta": meas.delta,
        "data_norm": l2_norm(cs, meas.u_delta),
        "sigma_true_range": [float(sigma_true.min()), float(sigma_true.max())],
        "status": "ok",
    }
    reconstructions = {}
    traces = {}
    for alg in algorithms:
        cache = ForwardCache(cs, cfg.solver_tol)
        driver = landweber if alg == "landweber" else rbl
        try:
            sigma, trace = driver(cache, sigma_start, meas, solver_cfg)
        except SolverFailure as exc:
            summary[alg] = {"status": "failed", "error": str(exc),
                            "achieved": getattr(exc, "achieved", None)}
            summary["status"] = "failed"
            continue
        entry = dict(trace.totals)
        entry["status"] = "ok"
        entry["time_s"] = entry["time_ns"] / 1e9
        iters = entry.get("iterations", entry.get("inner_iterations"))
        entry["time_per_iteration_s"] = entry["time_s"] / max(iters, 1)
        entry["sigma_error_true"] = parameter_l2_norm(sigma - sigma_true)
        entry["flags"] = list(trace.flags)
        if cfg.setting == "partial":
            entry.update(_near_far_errors(partition, cfg.region, sigma, sigma_true))
        summary[alg] = entry
        reconstructions[alg] = sigma
        traces[alg] = trace

    if "landweber" in reconstructions and "rbl" in reconstructions:
        lw, rb = summary["landweber"], summary["rbl"]
        summary["comparison"] = {
            "sigma_diff_l2": parameter_l2_norm(
                reconstructions["rbl"] - reconstructions["landweber"]),
            "speed_up": lw["time_ns"] / rb["time_ns"],
            "forward_solves": {"landweber": lw["forward_solves"],
                               "rbl": rb["forward_solves"]},
        }

    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        write_grid(os.path.join(cfg.out, "sigma_true.csv"), sigma_true,
                   cfg.q, cfg.setting)
        write_grid(os.path.join(cfg.out, "u_exact.csv"), u_exact,
                   cfg.n, cfg.setting)
        write_grid(os.path.join(cfg.out, "u_delta.csv"), meas.u_delta,
                   cfg.n, cfg.setting)
        for alg, sigma in reconstructions.items():
            write_grid(os.path.join(cfg.out, f"{alg}_sigma.csv"), sigma,
                       cfg.q, cfg.setting)
        for alg, trace in traces.items():
            trace.write_csv(os.path.join(cfg.out, f"{alg}_trace.csv"))
        with open(os.path.join(cfg.out, "summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return summary


def noise_sweep(cfg, levels):
    """Run the accelerated reconstruction once per noise level.

    Levels must be positive and strictly decreasing, so the report reads
    from coarse to fine data; an empty list yields an empty report.
    Failures are recorded per level and do not abort the sweep.
    """
    levels = [float(lv) for lv in levels]
    if any(lv <= 0.0 for lv in levels):
        raise ValueError(f"noise levels must be > 0, got {levels}")
    if any(b >= a for a, b in zip(levels, levels[1:])):
        raise ValueError(f"noise levels must be strictly decreasing, got {levels}")
    report = {"config": cfg.to_dict(), "levels": []}
    for lv in levels:
        sub = replace(cfg, noise=lv,
                      out=os.path.join(cfg.out, f"noise_{lv:g}") if cfg.out else None)
        summary = run_experiment(sub, algorithms=("rbl",))
        entry = {"noise": lv, "delta": summary["delta"],
                 "status": summary["rbl"].get("status", "failed")}
        if entry["status"] == "ok":
            rb = summary["rbl"]
            entry.update(
                sigma_error=rb["sigma_error_true"],
                converged=rb["converged"],
                outer_iterations=rb["outer_iterations"],
                inner_iterations=rb["inner_iterations"],
                forward_solves=rb["forward_solves"],
                time_s=rb["time_s"],
            )
        else:
            entry["error"] = summary["rbl"].get("error")
        report["levels"].append(entry)
    if cfg.out:
        os.makedirs(cfg.out, exist_ok=True)
        with open(os.path.join(cfg.out, "sweep.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return report
