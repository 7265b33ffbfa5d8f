"""Landweber iteration and its reduced-basis accelerated variant.

Both drivers reconstruct a piecewise constant coefficient from noisy
interior measurements of the forward solution and stop by the
discrepancy principle ||F(sigma) - u_delta|| <= tau * delta (masked
norm in the partial-data setting).

The accelerated driver keeps the full-order operator out of the inner
loop: per outer iteration it spends exactly one primal solve (the
discrepancy check, which doubles as the primal enrichment snapshot) and
one dual solve (the dual snapshot), then iterates reduced updates until
the reduced misfit passes the discrepancy test or the certified
reduction error Delta_N exceeds the trust radius (tau - 2) * delta.
"""

import time
from dataclasses import dataclass

import numpy as np

from .fem import (SolverFailure, check_admissible, l2_norm,
                  parameter_l2_norm)
from .forward import (ForwardCache, dual_solve, estimate_operator_norm,
                      forward)
from .reduced import (EstimatorWorkspace, ReducedModel, error_estimator,
                      reduced_dual, reduced_forward, reduced_update,
                      residual_norm)

__all__ = [
    "Measurement",
    "SolverConfig",
    "RunTrace",
    "restrict",
    "extend",
    "landweber",
    "rbl",
    "update_error_probe",
]


def restrict(v, mask):
    """Measurement restriction: pick the masked nodal values."""
    return np.asarray(v)[mask]


def extend(values, mask):
    """Zero-extension, the adjoint of ``restrict`` under the Euclidean
    pairing of masked and full coefficient vectors."""
    out = np.zeros(mask.shape[0])
    out[mask] = values
    return out


@dataclass
class Measurement:
    """Noisy data for one inversion run.

    ``u_delta`` always lives on the full interior grid; with a mask it
    is zero outside the measurement nodes and all misfit norms are
    masked (computed as full mass-matrix norms of zero-extended
    restrictions).  ``delta`` is the noise level in that norm.
    """

    u_delta: np.ndarray
    delta: float
    mask: np.ndarray = None

    def __post_init__(self):
        self.u_delta = np.asarray(self.u_delta, dtype=float)
        if self.delta < 0.0:
            raise ValueError(f"noise level delta must be >= 0, got {self.delta}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.u_delta.shape:
                raise ValueError("measurement mask and data have different shapes")
            if np.any(self.u_delta[~self.mask] != 0.0):
                raise ValueError("data must be zero outside the measurement mask")

    def mismatch(self, u):
        """Zero-extended restricted mismatch u_delta - u."""
        d = self.u_delta - u
        if self.mask is not None:
            d = np.where(self.mask, d, 0.0)
        return d


@dataclass
class SolverConfig:
    """Iteration protocol shared by both drivers.

    ``omega`` is either an explicit damping factor (>= 0) or "auto",
    which sets omega = 0.5 / ||F'(sigma_start)|| via power iteration
    (restricted operator in the partial setting).  ``tau`` must exceed 2
    for the trust-region logic to be meaningful.
    """

    tau: float = 2.5
    omega: object = "auto"
    max_outer: int = 200
    max_inner: int = 1_000_000
    max_total: int = 10_000_000
    solver_tol: float = 1e-12
    positivity_floor: float = 1e-8
    clamp_policy: str = "abort"
    opnorm_iters: int = 50
    seed: int = 0
    probe: bool = False

    def validate(self):
        if not self.tau > 2.0:
            raise ValueError(f"discrepancy factor tau must be > 2, got {self.tau}")
        if self.omega != "auto":
            omega = float(self.omega)
            if not np.isfinite(omega) or omega < 0.0:
                raise ValueError(f"omega must be 'auto' or a finite value >= 0, got {self.omega!r}")
        for name in ("max_outer", "max_inner", "max_total", "opnorm_iters"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 < self.solver_tol < 1.0:
            raise ValueError(f"solver_tol must be in (0, 1), got {self.solver_tol}")
        if self.positivity_floor <= 0.0:
            raise ValueError(f"positivity_floor must be > 0, got {self.positivity_floor}")
        if self.clamp_policy not in ("abort", "clamp"):
            raise ValueError(f"clamp_policy must be 'abort' or 'clamp', got {self.clamp_policy!r}")
        return self


class RunTrace:
    """Per-iteration record of a reconstruction run.

    Rows carry (iter, kind, residual, reduced_residual, delta_N,
    update_error, t_wall_ns) with kind "full" for Landweber iterations
    and "outer"/"inner" for the accelerated driver.  ``iter`` counts
    within the row kind; missing values stay None and serialize to
    empty CSV fields.  ``totals`` is filled by the driver, ``flags``
    collects irregular events (clamping, stalls, cap hits).
    """

    COLUMNS = ("iter", "kind", "residual", "reduced_residual", "delta_N",
               "update_error", "t_wall_ns")

    def __init__(self):
        self.rows = []
        self.totals = {}
        self.flags = []

    def record(self, iteration, kind, residual=None, reduced_residual=None,
               delta_n=None, update_error=None):
        self.rows.append((iteration, kind, residual, reduced_residual,
                          delta_n, update_error, time.perf_counter_ns()))

    def amend_last(self, residual=None, update_error=None):
        """Fill probe fields of the most recent row."""
        it, kind, res, red, dn, err, t = self.rows[-1]
        if residual is not None:
            res = residual
        if update_error is not None:
            err = update_error
        self.rows[-1] = (it, kind, res, red, dn, err, t)

    def write_csv(self, path):
        with open(path, "w") as fh:
            fh.write(",".join(self.COLUMNS) + "\n")
            for row in self.rows:
                fields = []
                for val in row:
                    if val is None:
                        fields.append("")
                    elif isinstance(val, str):
                        fields.append(val)
                    elif isinstance(val, (int, np.integer)):
                        fields.append(str(int(val)))
                    else:
                        fields.append(repr(float(val)))
                fh.write(",".join(fields) + "\n")


def _resolve_omega(cs, sigma_start, meas, cfg):
    """Damping factor; the power iteration runs on a throwaway cache so
    its solves never contaminate the run accounting."""
    if cfg.omega != "auto":
        return float(cfg.omega)
    probe_cache = ForwardCache(cs, cfg.solver_tol)
    est = estimate_operator_norm(probe_cache, sigma_start, iters=cfg.opnorm_iters,
                                 seed=cfg.seed, mask=meas.mask)
    if est <= 0.0:
        raise SolverFailure("operator norm estimate vanished; cannot set omega")
    return 0.5 / est


def _step(cs, sigma, omega, direction, cfg, trace, where):
    """Apply a damped update respecting the positivity floor."""
    sigma_new = sigma + omega * direction
    low = sigma_new.min()
    if low < cfg.positivity_floor:
        if cfg.clamp_policy == "abort":
            raise SolverFailure(
                f"iterate left the admissible set at {where}: "
                f"min sigma = {low:.3e} < floor {cfg.positivity_floor:g}",
                achieved=low,
            )
        sigma_new = np.maximum(sigma_new, cfg.positivity_floor)
        trace.flags.append(f"clamped at {where}")
    return sigma_new


def landweber(cache, sigma_start, meas, cfg):
    """Damped Landweber iteration with discrepancy stopping.

    Returns (sigma, trace).  Each iteration costs exactly one primal and
    one dual solve; the final discrepancy check adds one primal solve.
    On cap exhaustion the best iterate (smallest misfit) is returned and
    ``trace.totals["converged"]`` is False.
    """
    cfg.validate()
    cs = cache.cs
    sigma = check_admissible(cs, sigma_start).copy()
    omega = _resolve_omega(cs, sigma, meas, cfg)
    threshold = cfg.tau * meas.delta
    trace = RunTrace()
    counters0 = cache.counters()
    t0 = time.perf_counter_ns()

    best_sigma, best_res = sigma, np.inf
    iterations = 0
    converged = False
    while True:
        u = forward(cache, sigma)
        mismatch = meas.mismatch(u)
        res = l2_norm(cs, mismatch)
        trace.record(iterations, "full", residual=res)
        if res < best_res:
            best_sigma, best_res = sigma, res
        if res <= threshold:
            converged = True
            break
        if iterations >= cfg.max_total:
            trace.flags.append("max_total reached")
            break
        u_l = dual_solve(cache, sigma, mismatch)
        update = cs.component_pairings(u, u_l)
        sigma = _step(cs, sigma, omega, update, cfg, trace,
                      f"iteration {iterations}")
        iterations += 1

    if not converged:
        sigma = best_sigma
    counters = {k: v - counters0[k] for k, v in cache.counters().items()}
    trace.totals = {
        "algorithm": "landweber",
        "iterations": iterations,
        "converged": converged,
        "omega": omega,
        "tau": cfg.tau,
        "delta": meas.delta,
        "final_residual": best_res if not converged else res,
        "forward_solves": 2 * iterations,
        "time_ns": time.perf_counter_ns() - t0,
        **counters,
    }
    return sigma, trace


def update_error_probe(cache, model, sigma, meas, reduced_direction=None):
    """Distance between the reduced and the full-order update direction.

    Computes the exact Landweber direction at sigma (one primal plus one
    dual solve on ``cache``) and returns
    (||s_reduced - s_full||_L2, full_misfit_norm); the norm is the
    piecewise constant L2 norm on the partition.  The reduced direction
    is recomputed from the model unless passed in.  Use a dedicated
    cache when the solve accounting of the main run must stay untouched.
    """
    if reduced_direction is None:
        reduced_direction, _ = reduced_update(model, sigma)
    u = forward(cache, sigma)
    mismatch = meas.mismatch(u)
    full_res = l2_norm(cache.cs, mismatch)
    u_l = dual_solve(cache, sigma, mismatch)
    s_full = cache.cs.component_pairings(u, u_l)
    err = parameter_l2_norm(np.asarray(reduced_direction) - s_full)
    return err, full_res


def rbl(cache, sigma_start, meas, cfg, track_residual_gram=False):
    """Reduced-basis accelerated Landweber iteration.

    Returns (sigma, trace).  Outer iterations enrich the primal basis
    with F(sigma_n) (reusing the discrepancy-check solve) and the dual
    basis with the dual snapshot of the current mismatch, then run
    reduced updates until the reduced misfit passes the discrepancy test
    or the error bound leaves the trust region; the termination test is
    evaluated before the first update as well, so an already converged
    enriched iterate exits immediately.

    Full-order work: exactly 2 solves per outer iteration plus the
    final discrepancy check.  With ``cfg.probe`` every inner update also
    records the full-order update distance and misfit through a separate
    cache (expensive; diagnostics only).
    """
    cfg.validate()
    cs = cache.cs
    sigma = check_admissible(cs, sigma_start).copy()
    omega = _resolve_omega(cs, sigma, meas, cfg)
    threshold = cfg.tau * meas.delta
    trust_radius = (cfg.tau - 2.0) * meas.delta
    trace = RunTrace()
    counters0 = cache.counters()
    t0 = time.perf_counter_ns()

    model = ReducedModel(cs, meas.u_delta, mask=meas.mask,
                         track_residual_gram=track_residual_gram)
    workspace = EstimatorWorkspace(cs)
    probe_cache = ForwardCache(cs, cfg.solver_tol) if cfg.probe else None

    best_sigma, best_res = sigma, np.inf
    outer = 0
    inner_total = 0
    inner_checks = 0
    converged = False
    while True:
        u = forward(cache, sigma)
        mismatch = meas.mismatch(u)
        res = l2_norm(cs, mismatch)
        trace.record(outer, "outer", residual=res)
        if res < best_res:
            best_sigma, best_res = sigma, res
        if res <= threshold:
            converged = True
            break
        if outer >= cfg.max_outer:
            trace.flags.append("max_outer reached")
            break
        if inner_total >= cfg.max_total:
            trace.flags.append("max_total reached")
            break

        psi_dual = dual_solve(cache, sigma, mismatch)
        model, added_primal = model.enrich_primal(u)
        model, added_dual = model.enrich_dual(psi_dual)

        inner = 0
        coeffs = reduced_forward(model, sigma)
        while True:
            red_res = residual_norm(model, coeffs)
            delta_n = error_estimator(model, workspace, sigma, coeffs)
            trace.record(inner_checks, "inner", reduced_residual=red_res,
                         delta_n=delta_n)
            inner_checks += 1
            if red_res <= threshold or delta_n > trust_radius:
                break
            if inner >= cfg.max_inner:
                trace.flags.append(f"max_inner reached in outer {outer}")
                break
            if inner_total >= cfg.max_total:
                break
            d = reduced_dual(model, sigma, coeffs)
            direction = np.einsum("i,kij,j->k", coeffs, model.qk, d)
            if probe_cache is not None:
                err, full_res = update_error_probe(probe_cache, model, sigma,
                                                  meas, direction)
                trace.amend_last(residual=full_res, update_error=err)
            sigma = _step(cs, sigma, omega, direction, cfg, trace,
                          f"outer {outer} inner {inner}")
            coeffs = reduced_forward(model, sigma)
            inner += 1
            inner_total += 1

        if inner == 0 and not (added_primal or added_dual):
            trace.flags.append(f"stalled at outer {outer}")
            break
        outer += 1

    if not converged:
        sigma = best_sigma
    counters = {k: v - counters0[k] for k, v in cache.counters().items()}
    trace.totals = {
        "algorithm": "rbl",
        "outer_iterations": outer,
        "inner_iterations": inner_total,
        "converged": converged,
        "omega": omega,
        "tau": cfg.tau,
        "delta": meas.delta,
        "final_residual": best_res if not converged else res,
        "forward_solves": 2 * outer,
        "basis_sizes": [model.n1, model.n2],
        "time_ns": time.perf_counter_ns() - t0,
        **counters,
    }
    return sigma, trace
