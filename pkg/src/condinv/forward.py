"""Full-order forward operator, dual problem and derivative actions.

The parameter-to-solution map F sends a piecewise constant coefficient
sigma to the FEM solution of B(sigma) u = f.  The dual (adjoint-state)
problem B(sigma) u_l = -M l turns derivative adjoints into cheap
component pairings:

    (F'(sigma)* l)_k = u_sigma^T B^k u_l,

which is the workhorse of every Landweber update.
"""

import numpy as np
import scipy.linalg

from .fem import SolverFailure, check_admissible, l2_norm

__all__ = [
    "ForwardCache",
    "forward",
    "dual_solve",
    "jacobian_apply",
    "adjoint_apply",
    "landweber_update",
    "estimate_operator_norm",
]


class ForwardCache:
    """Solver state and solve counters for one ComponentSystem.

    The banded Cholesky factorization of B(sigma) is cached and keyed by
    the current sigma, so consecutive primal/dual solves at the same
    iterate factor only once.  Every solve is verified against
    ``solver_tol`` (relative algebraic residual, with one iterative
    refinement pass before giving up) and counted.
    """

    def __init__(self, cs, solver_tol=1e-12):
        self.cs = cs
        self.solver_tol = solver_tol
        self.primal_solves = 0
        self.dual_solves = 0
        self.jacobian_solves = 0
        self._sigma_key = None
        self._factor = None

    def counters(self):
        return {
            "primal_solves": self.primal_solves,
            "dual_solves": self.dual_solves,
            "jacobian_solves": self.jacobian_solves,
        }

    def _factorization(self, sigma):
        key = sigma.tobytes()
        if key != self._sigma_key:
            flat, vals, keys, bw = self.cs.banded_layout()
            w = vals * sigma[keys]
            ab = np.bincount(flat, weights=w,
                             minlength=(bw + 1) * self.cs.dim)
            try:
                self._factor = scipy.linalg.cholesky_banded(
                    ab.reshape(bw + 1, self.cs.dim), lower=False)
            except scipy.linalg.LinAlgError as exc:
                raise SolverFailure(f"stiffness matrix not positive definite: {exc}")
            self._sigma_key = key
        return self._factor

    def stiffness_solve(self, sigma, rhs):
        """Solve B(sigma) x = rhs via the cached factorization."""
        cb = self._factorization(sigma)
        x = scipy.linalg.cho_solve_banded((cb, False), rhs)
        rhs_norm = np.linalg.norm(rhs)
        if rhs_norm > 0.0:
            res = self.cs.apply_weighted(sigma, x) - rhs
            if np.linalg.norm(res) > self.solver_tol * rhs_norm:
                x -= scipy.linalg.cho_solve_banded((cb, False), res)
                res = self.cs.apply_weighted(sigma, x) - rhs
                if np.linalg.norm(res) > self.solver_tol * rhs_norm:
                    raise SolverFailure(
                        f"stiffness solve missed tolerance {self.solver_tol:g}",
                        achieved=np.linalg.norm(res) / rhs_norm,
                    )
        return x


def forward(cache, sigma):
    """Evaluate F(sigma): solve B(sigma) u = f.

    Parameters
    ----------
    cache : ForwardCache
    sigma : array_like, shape (p,)
        Strictly positive coefficient vector.

    Returns
    -------
    ndarray
        Nodal coefficients of the forward solution (all negative, by
        the discrete maximum principle of the M-matrix B(sigma)).
    """
    sigma = check_admissible(cache.cs, sigma)
    u = cache.stiffness_solve(sigma, cache.cs.load)
    cache.primal_solves += 1
    return u


def dual_solve(cache, sigma, l):
    """Solve the dual problem B(sigma) u_l = -M l for a P1 function l."""
    sigma = check_admissible(cache.cs, sigma)
    rhs = -(cache.cs.mass @ np.asarray(l, dtype=float))
    u_l = cache.stiffness_solve(sigma, rhs)
    cache.dual_solves += 1
    return u_l


def jacobian_apply(cache, sigma, kappa, u_sigma=None):
    """Directional derivative F'(sigma) kappa.

    Solves B(sigma) v = -sum_k kappa_k B^k u_sigma; kappa may have any
    sign.  Passing the precomputed forward solution avoids an extra
    primal solve.
    """
    sigma = check_admissible(cache.cs, sigma)
    kappa = np.asarray(kappa, dtype=float)
    if kappa.shape != (cache.cs.p,):
        raise ValueError(f"direction has shape {kappa.shape}, expected ({cache.cs.p},)")
    if u_sigma is None:
        u_sigma = forward(cache, sigma)
    rhs = -cache.cs.apply_weighted(kappa, u_sigma)
    v = cache.stiffness_solve(sigma, rhs)
    cache.jacobian_solves += 1
    return v


def adjoint_apply(cache, sigma, l, u_sigma=None):
    """Adjoint action F'(sigma)* l as a length-p vector.

    Computes the dual solution for l and returns the component pairings
    u_sigma^T B^k u_l.  The adjoint identity
    <F'(sigma) kappa, l>_L2 = <kappa, F'(sigma)* l>_2 holds up to solver
    tolerance.
    """
    if u_sigma is None:
        u_sigma = forward(cache, sigma)
    u_l = dual_solve(cache, sigma, l)
    return cache.cs.component_pairings(u_sigma, u_l)


def landweber_update(cache, sigma, u_delta):
    """One damped-iteration ingredient: update direction and misfit.

    Returns (update, residual_norm) with
    update = F'(sigma)*(u_delta - F(sigma)) and
    residual_norm = ||F(sigma) - u_delta||_L2.  Costs exactly one primal
    and one dual solve.
    """
    u = forward(cache, sigma)
    mismatch = np.asarray(u_delta, dtype=float) - u
    residual_norm = l2_norm(cache.cs, mismatch)
    u_l = dual_solve(cache, sigma, mismatch)
    update = cache.cs.component_pairings(u, u_l)
    return update, residual_norm


def estimate_operator_norm(cache, sigma, iters=50, seed=0, mask=None):
    """Estimate ||F'(sigma)|| by power iteration on F'(sigma)* F'(sigma).

    The iteration runs on the symmetric positive semidefinite map
    kappa -> F'* (M-weighted F' kappa); the returned value is the square
    root of the final Rayleigh quotient, which grows monotonically with
    ``iters``.  With ``mask`` the derivative is composed with the
    restriction to the measurement nodes (zero-extension adjoint), i.e.
    the norm of the partial-data operator is estimated.

    Each iteration costs one jacobian and one dual-type solve on the
    cache's counters.
    """
    sigma = check_admissible(cache.cs, sigma)
    if iters < 1:
        raise ValueError(f"power iteration needs iters >= 1, got {iters}")
    cs = cache.cs
    u = forward(cache, sigma)
    rng = np.random.default_rng(seed)
    kappa = rng.standard_normal(cs.p)
    estimate = 0.0
    for _ in range(iters):
        kappa = kappa / np.linalg.norm(kappa)
        v = jacobian_apply(cache, sigma, kappa, u_sigma=u)
        if mask is not None:
            v = np.where(mask, v, 0.0)
        y = cs.mass @ v
        if mask is not None:
            y = np.where(mask, y, 0.0)
        u_y = cache.stiffness_solve(sigma, -y)
        cache.dual_solves += 1
        a_kappa = cs.component_pairings(u, u_y)
        rayleigh = kappa @ a_kappa
        estimate = float(np.sqrt(max(rayleigh, 0.0)))
        if not np.any(a_kappa):
            break  # derivative vanished; keep the zero estimate
        kappa = a_kappa
    return estimate
