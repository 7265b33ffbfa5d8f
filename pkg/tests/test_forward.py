import numpy as np
import pytest

import oracle
from condinv import (
    ForwardCache,
    SolverFailure,
    adjoint_apply,
    dual_solve,
    estimate_operator_norm,
    forward,
    jacobian_apply,
    l2_inner,
    landweber_update,
    l2_norm,
)


def test_forward_matches_dense_oracle(mid_system, rng):
    part, cs = mid_system
    cache = ForwardCache(cs)
    sigma = rng.uniform(1.0, 5.0, cs.p)
    expected = oracle.dense_forward(part.grid.n, part.q, sigma)
    assert np.allclose(forward(cache, sigma), expected, rtol=1e-10, atol=1e-14)


def test_forward_scales_inversely_for_constant_sigma(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    u_one = forward(cache, np.ones(cs.p))
    u_four = forward(cache, np.full(cs.p, 4.0))
    assert np.allclose(u_four, u_one / 4.0, rtol=1e-11, atol=1e-16)


def test_forward_maximum_principle(toy_system, rng):
    part, cs = toy_system
    cache = ForwardCache(cs)
    for _ in range(20):
        sigma = rng.uniform(0.5, 8.0, cs.p)
        assert forward(cache, sigma).max() < 0.0


def test_forward_rejects_inadmissible(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    with pytest.raises(ValueError):
        forward(cache, np.zeros(cs.p))


def test_forward_counts_solves(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    assert cache.counters() == {"primal_solves": 0, "dual_solves": 0,
                                "jacobian_solves": 0}
    forward(cache, np.ones(cs.p))
    forward(cache, np.ones(cs.p))
    assert cache.counters()["primal_solves"] == 2
    assert cache.counters()["dual_solves"] == 0


def test_solver_verification_failure(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs, solver_tol=1e-30)
    with pytest.raises(SolverFailure) as err:
        forward(cache, np.ones(cs.p))
    assert err.value.achieved is not None


def test_dual_matches_dense_oracle(mid_system, rng):
    part, cs = mid_system
    cache = ForwardCache(cs)
    sigma = rng.uniform(1.0, 5.0, cs.p)
    l = rng.standard_normal(cs.dim)
    expected = oracle.dense_dual(part.grid.n, part.q, sigma, l)
    assert np.allclose(dual_solve(cache, sigma, l), expected,
                       rtol=1e-10, atol=1e-15)


def test_dual_zero_functional(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    assert np.array_equal(dual_solve(cache, np.ones(cs.p), np.zeros(cs.dim)),
                          np.zeros(cs.dim))


def test_jacobian_matches_dense_oracle(mid_system, rng):
    part, cs = mid_system
    cache = ForwardCache(cs)
    sigma = rng.uniform(1.0, 5.0, cs.p)
    jac = oracle.dense_jacobian_matrix(part.grid.n, part.q, sigma)
    kappa = rng.standard_normal(cs.p)
    assert np.allclose(jacobian_apply(cache, sigma, kappa), jac @ kappa,
                       rtol=1e-9, atol=1e-14)


def test_jacobian_linear_in_direction(toy_system, rng):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma = rng.uniform(1.0, 5.0, cs.p)
    k1 = rng.standard_normal(cs.p)
    k2 = rng.standard_normal(cs.p)
    v = jacobian_apply(cache, sigma, 2.0 * k1 - k2)
    expected = (2.0 * jacobian_apply(cache, sigma, k1)
                - jacobian_apply(cache, sigma, k2))
    assert np.allclose(v, expected, rtol=1e-9, atol=1e-15)
    assert np.array_equal(jacobian_apply(cache, sigma, np.zeros(cs.p)),
                          np.zeros(cs.dim))


def test_jacobian_finite_difference(toy_system, rng):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma = np.full(cs.p, 3.0)
    kappa = rng.standard_normal(cs.p)
    v = jacobian_apply(cache, sigma, kappa)
    eps = 1e-6
    fd = (forward(cache, sigma + eps * kappa)
          - forward(cache, sigma - eps * kappa)) / (2.0 * eps)
    assert np.allclose(v, fd, rtol=1e-6, atol=1e-12)


def test_adjoint_matches_dense_oracle(mid_system, rng):
    part, cs = mid_system
    cache = ForwardCache(cs)
    sigma = rng.uniform(1.0, 5.0, cs.p)
    l = rng.standard_normal(cs.dim)
    expected = oracle.dense_adjoint(part.grid.n, part.q, sigma, l)
    assert np.allclose(adjoint_apply(cache, sigma, l), expected,
                       rtol=1e-9, atol=1e-13)


def test_adjoint_identity_spot(toy_system, rng):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma = rng.uniform(1.0, 5.0, cs.p)
    kappa = rng.standard_normal(cs.p)
    l = rng.standard_normal(cs.dim)
    lhs = l2_inner(cs, jacobian_apply(cache, sigma, kappa), l)
    rhs = kappa @ adjoint_apply(cache, sigma, l)
    assert abs(lhs - rhs) <= 1e-12 * (1.0 + abs(lhs))


def test_landweber_update_at_data(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma = np.full(cs.p, 2.0)
    u_delta = forward(cache, sigma)
    before = cache.counters()
    update, res = landweber_update(cache, sigma, u_delta)
    after = cache.counters()
    assert res == 0.0
    assert np.array_equal(update, np.zeros(cs.p))
    assert after["primal_solves"] - before["primal_solves"] == 1
    assert after["dual_solves"] - before["dual_solves"] == 1


def test_landweber_update_matches_adjoint(toy_system, rng):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma = rng.uniform(1.0, 5.0, cs.p)
    u_delta = forward(cache, np.full(cs.p, 3.0)) * 1.01
    update, res = landweber_update(cache, sigma, u_delta)
    mismatch = u_delta - forward(cache, sigma)
    assert res == pytest.approx(l2_norm(cs, mismatch), rel=1e-12)
    expected = adjoint_apply(cache, sigma, mismatch)
    assert np.allclose(update, expected, rtol=1e-9, atol=1e-16)


def test_operator_norm_against_dense(mid_system):
    part, cs = mid_system
    cache = ForwardCache(cs)
    sigma = np.full(cs.p, 3.0)
    jac = oracle.dense_jacobian_matrix(part.grid.n, part.q, sigma)
    _, mass, _ = oracle.dense_system(part.grid.n, part.q)
    gram = jac.T @ mass @ jac
    exact = float(np.sqrt(np.linalg.eigvalsh(gram).max()))
    est = estimate_operator_norm(cache, sigma, iters=100, seed=0)
    assert est == pytest.approx(exact, rel=1e-2)
    assert est <= exact * (1.0 + 1e-10)  # Rayleigh quotients underestimate


def test_operator_norm_monotone_in_iters(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    sigma = np.full(cs.p, 3.0)
    e5 = estimate_operator_norm(cache, sigma, iters=5, seed=3)
    e50 = estimate_operator_norm(cache, sigma, iters=50, seed=3)
    assert e5 > 0.0
    assert e50 >= e5 - 1e-15


def test_operator_norm_masked_is_smaller(toy_system):
    part, cs = toy_system
    x, y = part.grid.interior_coordinates()
    mask = y <= 0.5
    full = estimate_operator_norm(ForwardCache(cs), np.full(cs.p, 3.0))
    masked = estimate_operator_norm(ForwardCache(cs), np.full(cs.p, 3.0),
                                    mask=mask)
    assert 0.0 < masked <= full * (1.0 + 1e-12)


def test_operator_norm_counts(toy_system):
    part, cs = toy_system
    cache = ForwardCache(cs)
    estimate_operator_norm(cache, np.full(cs.p, 3.0), iters=7)
    c = cache.counters()
    assert c["primal_solves"] == 1
    assert c["jacobian_solves"] == 7
    assert c["dual_solves"] == 7


def test_operator_norm_rejects_bad_iters(toy_system):
    part, cs = toy_system
    with pytest.raises(ValueError):
        estimate_operator_norm(ForwardCache(cs), np.full(cs.p, 3.0), iters=0)
