import numpy as np
import pytest

from condinv import (
    ExperimentConfig,
    ForwardCache,
    Measurement,
    ReducedModel,
    RunTrace,
    SolverConfig,
    SolverFailure,
    dual_solve,
    estimate_operator_norm,
    extend,
    forward,
    landweber,
    l2_norm,
    parameter_l2_norm,
    rbl,
    restrict,
    synthesize_measurement,
    update_error_probe,
)

TOY = dict(n=9, q=2, noise=0.01, seed=0)


@pytest.fixture(scope="module")
def toy_meas(toy_system):
    part, cs = toy_system
    meas, _ = synthesize_measurement(ExperimentConfig(**TOY), cs)
    return meas


@pytest.fixture(scope="module")
def lw_run(toy_system, toy_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma, trace = landweber(cache, np.full(cs.p, 3.0), toy_meas,
                             SolverConfig())
    return sigma, trace


@pytest.fixture(scope="module")
def rbl_run(toy_system, toy_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma, trace = rbl(cache, np.full(cs.p, 3.0), toy_meas, SolverConfig())
    return sigma, trace


# -- restriction actions ----------------------------------------------


def test_restrict_extend_roundtrip(rng):
    mask = np.array([True, False, True, True, False])
    v = rng.standard_normal(5)
    w = restrict(v, mask)
    assert w.shape == (3,)
    out = extend(w, mask)
    assert np.array_equal(out[mask], v[mask])
    assert np.array_equal(out[~mask], np.zeros(2))


def test_restrict_extend_adjoint(rng):
    mask = rng.uniform(size=40) < 0.5
    v = rng.standard_normal(40)
    w = rng.standard_normal(int(mask.sum()))
    assert extend(w, mask) @ v == pytest.approx(w @ restrict(v, mask))


# -- configuration and trace ------------------------------------------


def test_measurement_validation():
    with pytest.raises(ValueError, match="delta"):
        Measurement(np.zeros(4), -1.0)
    with pytest.raises(ValueError, match="shape"):
        Measurement(np.zeros(4), 0.1, mask=np.ones(3, dtype=bool))
    with pytest.raises(ValueError, match="zero outside"):
        Measurement(np.ones(4), 0.1, mask=np.array([True, True, False, False]))
    meas = Measurement(np.array([1.0, 2.0, 0.0, 0.0]), 0.1,
                       mask=np.array([True, True, False, False]))
    mm = meas.mismatch(np.ones(4))
    assert np.array_equal(mm, [0.0, 1.0, 0.0, 0.0])


def test_solver_config_validation():
    SolverConfig().validate()
    with pytest.raises(ValueError, match="tau"):
        SolverConfig(tau=2.0).validate()
    with pytest.raises(ValueError, match="omega"):
        SolverConfig(omega=-0.5).validate()
    with pytest.raises(ValueError):
        SolverConfig(omega="fast").validate()
    with pytest.raises(ValueError, match="max_outer"):
        SolverConfig(max_outer=0).validate()
    with pytest.raises(ValueError, match="solver_tol"):
        SolverConfig(solver_tol=0.0).validate()
    with pytest.raises(ValueError, match="positivity_floor"):
        SolverConfig(positivity_floor=-1e-3).validate()
    with pytest.raises(ValueError, match="clamp_policy"):
        SolverConfig(clamp_policy="ignore").validate()


def test_run_trace_csv(tmp_path):
    trace = RunTrace()
    trace.record(0, "outer", residual=1.5)
    trace.record(0, "inner", reduced_residual=0.5, delta_n=0.1)
    trace.amend_last(residual=0.25, update_error=1e-3)
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iter,kind,residual,reduced_residual,delta_N,update_error,t_wall_ns"
    assert lines[1].startswith("0,outer,1.5,,,")
    assert lines[2].startswith("0,inner,0.25,0.5,0.1,0.001")


# -- full-order iteration ---------------------------------------------


def test_landweber_immediate_convergence(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma0 = np.full(cs.p, 3.0)
    u_delta = forward(cache, sigma0)
    before = cache.counters()
    sigma, trace = landweber(cache, sigma0, Measurement(u_delta, 1e-3),
                             SolverConfig())
    after = cache.counters()
    assert trace.totals["converged"]
    assert trace.totals["iterations"] == 0
    assert trace.totals["forward_solves"] == 0
    assert after["primal_solves"] - before["primal_solves"] == 1
    assert after["dual_solves"] - before["dual_solves"] == 0
    assert np.array_equal(sigma, sigma0)


def test_landweber_zero_omega_stalls(toy_system, toy_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma, trace = landweber(cache, np.full(cs.p, 3.0), toy_meas,
                             SolverConfig(omega=0.0, max_total=5))
    assert not trace.totals["converged"]
    assert trace.totals["iterations"] == 5
    assert "max_total reached" in trace.flags
    assert np.array_equal(sigma, np.full(cs.p, 3.0))


def test_landweber_converges(toy_system, toy_meas, lw_run):
    part, cs = toy_system
    sigma, trace = lw_run
    tot = trace.totals
    assert tot["converged"]
    threshold = tot["tau"] * toy_meas.delta
    # discrepancy verified with an untouched cache
    res = l2_norm(cs, forward(ForwardCache(cs), sigma) - toy_meas.u_delta)
    assert res <= threshold
    assert res == pytest.approx(tot["final_residual"], rel=1e-9)
    # the previous iterate was still above the threshold
    assert trace.rows[-2][2] > threshold
    assert trace.rows[0][2] > trace.rows[-1][2]


def test_landweber_accounting(lw_run):
    _, trace = lw_run
    tot = trace.totals
    assert tot["primal_solves"] == tot["iterations"] + 1
    assert tot["dual_solves"] == tot["iterations"]
    assert tot["forward_solves"] == 2 * tot["iterations"]
    assert tot["jacobian_solves"] == 0
    assert len(trace.rows) == tot["iterations"] + 1
    assert all(row[1] == "full" for row in trace.rows)


def test_landweber_auto_omega_matches_manual(toy_system, toy_meas):
    part, cs = toy_system
    est = estimate_operator_norm(ForwardCache(cs), np.full(cs.p, 3.0),
                                 iters=50, seed=0)
    cache = ForwardCache(cs)
    sigma_a, trace_a = landweber(cache, np.full(cs.p, 3.0), toy_meas,
                                 SolverConfig(max_total=50))
    cache = ForwardCache(cs)
    sigma_m, trace_m = landweber(cache, np.full(cs.p, 3.0), toy_meas,
                                 SolverConfig(omega=0.5 / est, max_total=50))
    assert trace_a.totals["omega"] == pytest.approx(0.5 / est, rel=1e-12)
    assert np.array_equal(sigma_a, sigma_m)


@pytest.fixture(scope="module")
def downhill_meas(toy_system):
    # data from a much smaller coefficient: the first update direction
    # is negative in every component, so a huge step leaves the
    # admissible set immediately
    part, cs = toy_system
    u_delta = forward(ForwardCache(cs), np.full(cs.p, 0.05))
    return Measurement(u_delta, 1e-6)


def test_landweber_positivity_abort(toy_system, downhill_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    with pytest.raises(SolverFailure, match="admissible"):
        landweber(cache, np.full(cs.p, 3.0), downhill_meas,
                  SolverConfig(omega=1e9))


def test_landweber_positivity_clamp(toy_system, downhill_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma, trace = landweber(cache, np.full(cs.p, 3.0), downhill_meas,
                             SolverConfig(omega=1e9, clamp_policy="clamp",
                                          max_total=3))
    assert any(f.startswith("clamped") for f in trace.flags)
    assert sigma.min() >= SolverConfig().positivity_floor


def test_landweber_determinism(toy_system, toy_meas):
    part, cs = toy_system
    runs = []
    for _ in range(2):
        cache = ForwardCache(cs)
        sigma, trace = landweber(cache, np.full(cs.p, 3.0), toy_meas,
                                 SolverConfig(max_total=200))
        runs.append((sigma.tobytes(), [r[:6] for r in trace.rows]))
    assert runs[0] == runs[1]


# -- accelerated iteration --------------------------------------------


def test_rbl_converges_and_accounts(toy_system, toy_meas, rbl_run):
    part, cs = toy_system
    sigma, trace = rbl_run
    tot = trace.totals
    assert tot["converged"]
    threshold = tot["tau"] * toy_meas.delta
    res = l2_norm(cs, forward(ForwardCache(cs), sigma) - toy_meas.u_delta)
    assert res <= threshold
    assert tot["primal_solves"] == tot["outer_iterations"] + 1
    assert tot["dual_solves"] == tot["outer_iterations"]
    assert tot["forward_solves"] == 2 * tot["outer_iterations"]
    assert tot["basis_sizes"][0] <= tot["outer_iterations"]
    assert tot["basis_sizes"][1] <= tot["outer_iterations"]


def test_rbl_matches_landweber(lw_run, rbl_run):
    sigma_lw, _ = lw_run
    sigma_rb, _ = rbl_run
    assert parameter_l2_norm(sigma_rb - sigma_lw) <= 1e-3


def test_rbl_uses_far_fewer_full_solves(lw_run, rbl_run):
    _, lw_trace = lw_run
    _, rb_trace = rbl_run
    assert rb_trace.totals["forward_solves"] <= lw_trace.totals["forward_solves"] // 10


def test_rbl_inner_rows_respect_trust_region(toy_meas, rbl_run):
    _, trace = rbl_run
    cfg = SolverConfig()
    threshold = cfg.tau * toy_meas.delta
    trust_radius = (cfg.tau - 2.0) * toy_meas.delta
    inner = [r for r in trace.rows if r[1] == "inner"]
    assert inner, "accelerated run recorded no reduced iterations"
    # every row that was followed by an update passed both gates
    blocks = []
    current = []
    for row in trace.rows:
        if row[1] == "outer":
            if current:
                blocks.append(current)
            current = []
        else:
            current.append(row)
    if current:
        blocks.append(current)
    for block in blocks:
        for row in block[:-1]:
            assert row[3] > threshold
            assert row[4] <= trust_radius
        last = block[-1]
        assert last[3] <= threshold or last[4] > trust_radius


def test_rbl_termination_checked_before_first_update(toy_system):
    # data exactly matching the start guess: the accelerated driver must
    # exit at the first outer check without any reduced work
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma0 = np.full(cs.p, 3.0)
    u_delta = forward(cache, sigma0)
    sigma, trace = rbl(cache, sigma0, Measurement(u_delta, 1e-3),
                       SolverConfig())
    assert trace.totals["converged"]
    assert trace.totals["outer_iterations"] == 0
    assert trace.totals["inner_iterations"] == 0
    assert trace.totals["basis_sizes"] == [0, 0]


def test_rbl_zero_delta_stalls_cleanly(toy_system):
    # delta = 0 shrinks the trust region to nothing: no reduced update
    # is certified, and once enrichment stops adding vectors the driver
    # must flag the stall instead of looping
    part, cs = toy_system
    cache = ForwardCache(cs)
    cfg = ExperimentConfig(**{**TOY, "noise": 0.0})
    meas, _ = synthesize_measurement(cfg, cs)
    assert meas.delta == 0.0
    sigma, trace = rbl(cache, np.full(cs.p, 3.0), meas, SolverConfig())
    assert not trace.totals["converged"]
    assert any(f.startswith("stalled") for f in trace.flags)


def test_rbl_outer_cap(toy_system, toy_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma, trace = rbl(cache, np.full(cs.p, 3.0), toy_meas,
                       SolverConfig(max_outer=1))
    assert not trace.totals["converged"]
    assert "max_outer reached" in trace.flags
    assert trace.totals["outer_iterations"] == 1


def test_rbl_inner_cap(toy_system, toy_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma, trace = rbl(cache, np.full(cs.p, 3.0), toy_meas,
                       SolverConfig(max_inner=2, max_outer=3))
    assert not trace.totals["converged"]
    assert any(f.startswith("max_inner") for f in trace.flags)
    assert "max_outer reached" in trace.flags


def test_rbl_probe_reports_small_first_errors(toy_system, toy_meas):
    part, cs = toy_system
    cache = ForwardCache(cs)
    before = cache.counters()
    sigma, trace = rbl(cache, np.full(cs.p, 3.0), toy_meas,
                       SolverConfig(probe=True, max_outer=3, max_inner=50))
    after = cache.counters()
    # probing runs on its own cache; the run accounting is unchanged
    tot = trace.totals
    assert after["primal_solves"] - before["primal_solves"] == tot["primal_solves"]
    assert tot["primal_solves"] == tot["outer_iterations"] + 1
    blocks_first = []
    prev_kind = None
    for row in trace.rows:
        if row[1] == "inner" and prev_kind == "outer":
            blocks_first.append(row)
        prev_kind = row[1]
    assert blocks_first
    for row in blocks_first:
        if row[5] is None:
            continue  # terminal check, never probed
        # right after enrichment the reduced update reproduces the full
        # one and the reduced misfit matches the full misfit
        assert row[5] <= 1e-7 * (1.0 + abs(row[2]))
        assert abs(row[2] - row[3]) <= 1e-7 * (1.0 + abs(row[2]))


def test_rbl_probe_update_error_drops_at_enrichment(toy_system, toy_meas):
    # each enrichment restores the reduced update to near the full one,
    # so the probed error falls from the end of one inner block to the
    # start of the next
    part, cs = toy_system
    sigma, trace = rbl(ForwardCache(cs), np.full(cs.p, 3.0), toy_meas,
                       SolverConfig(probe=True))
    assert trace.totals["converged"]
    blocks = []
    for row in trace.rows:
        if row[1] == "outer":
            blocks.append([])
        elif row[1] == "inner" and blocks and row[5] is not None:
            blocks[-1].append(row[5])
    blocks = [b for b in blocks if b]
    assert len(blocks) >= 2
    for prev, nxt in zip(blocks, blocks[1:]):
        assert nxt[0] < prev[-1]


def test_rbl_determinism(toy_system, toy_meas):
    part, cs = toy_system
    runs = []
    for _ in range(2):
        cache = ForwardCache(cs)
        sigma, trace = rbl(cache, np.full(cs.p, 3.0), toy_meas,
                           SolverConfig(max_outer=3, max_inner=100))
        runs.append((sigma.tobytes(), [r[:6] for r in trace.rows]))
    assert runs[0] == runs[1]


def test_update_error_probe_on_enriched_model(toy_system):
    part, cs = toy_system
    main_cache = ForwardCache(cs)
    sigma = np.array([2.0, 3.0, 2.5, 3.5])
    u = forward(main_cache, sigma)
    u_delta = 1.05 * u
    meas = Measurement(u_delta, 0.01)
    model = ReducedModel(cs, u_delta)
    model, _ = model.enrich_primal(u)
    model, _ = model.enrich_dual(dual_solve(main_cache, sigma, u_delta - u))
    probe_cache = ForwardCache(cs)
    before = main_cache.counters()
    err, full_res = update_error_probe(probe_cache, model, sigma, meas)
    assert main_cache.counters() == before
    assert probe_cache.counters()["primal_solves"] == 1
    assert probe_cache.counters()["dual_solves"] == 1
    assert full_res == pytest.approx(l2_norm(cs, u_delta - u), rel=1e-12)
    assert err <= 1e-9


# -- partial measurements ---------------------------------------------


@pytest.fixture(scope="module")
def toy_partial(toy_system):
    part, cs = toy_system
    cfg = ExperimentConfig(**TOY, setting="partial", region=(0.0, 1.0, 0.0, 0.5))
    meas, _ = synthesize_measurement(cfg, cs)
    return meas


def test_partial_landweber(toy_system, toy_partial):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma, trace = landweber(cache, np.full(cs.p, 3.0), toy_partial,
                             SolverConfig())
    assert trace.totals["converged"]
    u = forward(ForwardCache(cs), sigma)
    masked = np.where(toy_partial.mask, u - toy_partial.u_delta, 0.0)
    assert l2_norm(cs, masked) <= SolverConfig().tau * toy_partial.delta
    assert trace.totals["primal_solves"] == trace.totals["iterations"] + 1


def test_partial_rbl_matches_partial_landweber(toy_system, toy_partial):
    part, cs = toy_system
    sigma_lw, _ = landweber(ForwardCache(cs), np.full(cs.p, 3.0),
                            toy_partial, SolverConfig())
    cache = ForwardCache(cs)
    sigma_rb, trace = rbl(cache, np.full(cs.p, 3.0), toy_partial,
                          SolverConfig())
    assert trace.totals["converged"]
    u = forward(ForwardCache(cs), sigma_rb)
    masked = np.where(toy_partial.mask, u - toy_partial.u_delta, 0.0)
    assert l2_norm(cs, masked) <= SolverConfig().tau * toy_partial.delta
    assert trace.totals["forward_solves"] == 2 * trace.totals["outer_iterations"]
    assert parameter_l2_norm(sigma_rb - sigma_lw) <= 1e-3
