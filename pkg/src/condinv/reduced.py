"""Reduced-basis surrogate of the forward map with certified error bound.

Two independent L2-orthonormal snapshot bases are kept, one for the
primal equation and one for the dual equation.  Because the stiffness
matrix separates into coefficient components, all Galerkin projections
are assembled once per enrichment and every reduced solve afterwards is
independent of the full-order dimension; the only documented exception
is the error estimator, which assembles the full-order residual of the
reduced solution.

The estimator is the rigorous a posteriori bound

    Delta_N(sigma) = ||v_r||_L2 / alpha(sigma),  M v_r = r,

with r the residual of the reduced solution and alpha(sigma) =
2 min(sigma) the L2 coercivity constant; it always dominates the true
reduction error ||F(sigma) - F_N(sigma)||_L2.
"""

import numpy as np
import scipy.sparse.linalg as spla

from .fem import coercivity_bound, check_admissible, l2_inner, l2_norm

__all__ = [
    "ReducedModel",
    "EstimatorWorkspace",
    "reduced_forward",
    "reduced_dual",
    "reduced_update",
    "residual_norm",
    "error_estimator",
    "error_estimator_gram",
]

# Snapshots whose orthogonal remainder falls below this relative size
# are considered linearly dependent and dropped.
DROP_TOL = 1e-10


def _orthonormal_remainder(cs, basis, snapshot):
    """Modified Gram-Schmidt against the basis columns, in the L2 inner
    product, with one re-orthogonalization pass.  Returns the normalized
    remainder or None if the snapshot is (numerically) dependent."""
    w = np.array(snapshot, dtype=float, copy=True)
    norm0 = l2_norm(cs, w)
    if norm0 == 0.0:
        return None
    for _ in range(2):
        for j in range(basis.shape[1]):
            w -= l2_inner(cs, basis[:, j], w) * basis[:, j]
    norm = l2_norm(cs, w)
    if norm < DROP_TOL * norm0:
        return None
    return w / norm


class EstimatorWorkspace:
    """Scratch state for the error estimator.

    Holds the component system and a factorization of the mass matrix so
    the Riesz representative solve M v_r = r costs one triangular
    back-substitution per call.
    """

    def __init__(self, cs):
        self.cs = cs
        self._mass_lu = spla.splu(cs.mass.tocsc())

    def mass_solve(self, rhs):
        return self._mass_lu.solve(rhs)


class ReducedModel:
    """Projected operators for one measurement.

    Immutable by convention: ``enrich_primal`` / ``enrich_dual`` return
    a new model with all projections extended incrementally (no
    re-projection from scratch).  The measurement vector is baked in so
    the data-side inner products are available in reduced form; with a
    measurement mask all data-misfit quantities use the masked norm
    (full mass norm of the zero-extended restriction) while the basis
    stays orthonormal in L2 of the whole square.

    Projected quantities, with V1/V2 the primal/dual basis matrices:

    - ``bn[k]``   = V1^T B^k V1, ``fn`` = V1^T f
    - ``bt[k]``   = V2^T B^k V2
    - ``qk[k]``   = V1^T B^k V2 (update pairings)
    - ``b1``      = V1^T M u_delta (masked variant ``b1m``, Gram ``g1m``)
    - ``b2``      = V2^T M u_delta, ``xm`` = V2^T M D V1 (dual data side)
    - ``n0``      = ||u_delta||^2 in the measurement norm

    With ``track_residual_gram`` the model additionally maintains the
    offline residual decomposition (Riesz representatives of the load
    and of every B^k psi_i) and their Gram matrix, enabling a full-order
    free estimator variant; the quadratic component count makes this
    practical for small p only, hence it is off by default.
    """

    def __init__(self, cs, u_delta, mask=None, track_residual_gram=False,
                 _state=None):
        self.cs = cs
        self.u_delta = np.asarray(u_delta, dtype=float)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        self.track_residual_gram = bool(track_residual_gram)
        dim, p = cs.dim, cs.p
        if self.u_delta.shape != (dim,):
            raise ValueError(f"data vector has shape {self.u_delta.shape}, expected ({dim},)")
        if self.mask is not None and self.mask.shape != (dim,):
            raise ValueError(f"mask has shape {self.mask.shape}, expected ({dim},)")
        if _state is not None:
            self.__dict__.update(_state)
            return
        self.v1 = np.zeros((dim, 0))
        self.v2 = np.zeros((dim, 0))
        self.bn = np.zeros((p, 0, 0))
        self.bt = np.zeros((p, 0, 0))
        self.qk = np.zeros((p, 0, 0))
        self.fn = np.zeros(0)
        self.b1 = np.zeros(0)
        self.b2 = np.zeros(0)
        self.xm = np.zeros((0, 0))
        masked_data = self._apply_mask(self.u_delta)
        self.n0 = float(masked_data @ (cs.mass @ masked_data))
        self._mass_data = cs.mass @ self.u_delta
        if self.mask is not None:
            self.g1m = np.zeros((0, 0))
            self.b1m = np.zeros(0)
        else:
            self.g1m = None
            self.b1m = None
        if self.track_residual_gram:
            # residual components ordered: load first, then one block of
            # p entries per primal basis vector
            self._res_ws = EstimatorWorkspace(cs)
            self._res_comp = [cs.load.copy()]
            self._res_riesz = [self._res_ws.mass_solve(cs.load)]
            self.gram_r = np.array([[self._res_riesz[0] @ self._res_comp[0]]])
        else:
            self._res_ws = None
            self._res_comp = None
            self._res_riesz = None
            self.gram_r = None

    # -- bookkeeping ---------------------------------------------------

    @property
    def n1(self):
        return self.v1.shape[1]

    @property
    def n2(self):
        return self.v2.shape[1]

    def _apply_mask(self, v):
        if self.mask is None:
            return v
        return np.where(self.mask, v, 0.0)

    def _clone(self, **updates):
        state = {k: v for k, v in self.__dict__.items()
                 if k not in ("cs", "u_delta", "mask", "track_residual_gram")}
        state.update(updates)
        return ReducedModel(self.cs, self.u_delta, self.mask,
                            self.track_residual_gram, _state=state)

    # -- enrichment ----------------------------------------------------

    def enrich_primal(self, snapshot):
        """Add a primal snapshot.  Returns (model, added); a snapshot
        that is linearly dependent on the current basis is dropped and
        the model returned unchanged."""
        cs = self.cs
        psi = _orthonormal_remainder(cs, self.v1, snapshot)
        if psi is None:
            return self, False
        p, n1, n2 = cs.p, self.n1, self.n2
        y = cs.component_products(psi)
        m_psi = cs.mass @ psi

        bn = np.zeros((p, n1 + 1, n1 + 1))
        bn[:, :n1, :n1] = self.bn
        qk = np.zeros((p, n1 + 1, n2))
        qk[:, :n1, :] = self.qk
        for k in range(p):
            col = self.v1.T @ y[k]
            bn[k, :n1, n1] = col
            bn[k, n1, :n1] = col
            bn[k, n1, n1] = psi @ y[k]
            if n2:
                qk[k, n1, :] = y[k] @ self.v2
        fn = np.append(self.fn, cs.load @ psi)
        b1 = np.append(self.b1, m_psi @ self.u_delta)

        if self.mask is not None:
            d_psi = self._apply_mask(psi)
            m_dpsi = cs.mass @ d_psi
            col = self.v1.T @ self._apply_mask(m_dpsi)
            g1m = np.zeros((n1 + 1, n1 + 1))
            g1m[:n1, :n1] = self.g1m
            g1m[:n1, n1] = col
            g1m[n1, :n1] = col
            g1m[n1, n1] = d_psi @ m_dpsi
            b1m = np.append(self.b1m, d_psi @ self._mass_data)
            xm_col = self.v2.T @ m_dpsi if n2 else np.zeros(0)
        else:
            g1m, b1m = None, None
            xm_col = self.v2.T @ m_psi if n2 else np.zeros(0)
        xm = np.hstack([self.xm, xm_col[:, None]]) if n2 else np.zeros((0, n1 + 1))

        updates = dict(
            v1=np.hstack([self.v1, psi[:, None]]),
            bn=bn, qk=qk, fn=fn, b1=b1, g1m=g1m, b1m=b1m, xm=xm,
        )
        if self.track_residual_gram:
            comp = list(self._res_comp)
            riesz = list(self._res_riesz)
            old = len(comp)
            for k in range(p):
                comp.append(-y[k])
                riesz.append(self._res_ws.mass_solve(-y[k]))
            gram_r = np.zeros((old + p, old + p))
            gram_r[:old, :old] = self.gram_r
            for a in range(old, old + p):
                for b in range(a + 1):
                    val = riesz[a] @ comp[b]
                    gram_r[a, b] = val
                    gram_r[b, a] = val
            updates.update(_res_comp=comp, _res_riesz=riesz, gram_r=gram_r)
        return self._clone(**updates), True

    def enrich_dual(self, snapshot):
        """Add a dual snapshot; mirrors ``enrich_primal``."""
        cs = self.cs
        psi = _orthonormal_remainder(cs, self.v2, snapshot)
        if psi is None:
            return self, False
        p, n1, n2 = cs.p, self.n1, self.n2
        y = cs.component_products(psi)
        m_psi = cs.mass @ psi

        bt = np.zeros((p, n2 + 1, n2 + 1))
        bt[:, :n2, :n2] = self.bt
        qk = np.zeros((p, n1, n2 + 1))
        qk[:, :, :n2] = self.qk
        for k in range(p):
            col = self.v2.T @ y[k]
            bt[k, :n2, n2] = col
            bt[k, n2, :n2] = col
            bt[k, n2, n2] = psi @ y[k]
            if n1:
                qk[k, :, n2] = self.v1.T @ y[k]
        b2 = np.append(self.b2, m_psi @ self.u_delta)
        xm_row = self.v1.T @ self._apply_mask(m_psi) if n1 else np.zeros(0)
        xm = np.vstack([self.xm, xm_row[None, :]]) if n1 else np.zeros((n2 + 1, 0))
        return self._clone(
            v2=np.hstack([self.v2, psi[:, None]]),
            bt=bt, qk=qk, b2=b2, xm=xm,
        ), True


def reduced_forward(model, sigma):
    """Solve the reduced primal problem; returns basis coefficients."""
    if model.n1 == 0:
        raise ValueError("reduced solve requires a nonempty primal basis")
    sigma = check_admissible(model.cs, sigma)
    a_red = np.tensordot(sigma, model.bn, axes=1)
    return np.linalg.solve(a_red, model.fn)


def reduced_dual(model, sigma, coeffs):
    """Solve the reduced dual problem for l = u_delta - u_N.

    ``coeffs`` are the reduced primal coefficients describing u_N; with
    a mask, l is the zero-extended restricted mismatch.  Returns dual
    basis coefficients.
    """
    if model.n2 == 0:
        raise ValueError("reduced solve requires a nonempty dual basis")
    sigma = check_admissible(model.cs, sigma)
    a_red = np.tensordot(sigma, model.bt, axes=1)
    rhs = model.xm @ coeffs - model.b2
    return np.linalg.solve(a_red, rhs)


def residual_norm(model, coeffs):
    """Data misfit ||u_N - u_delta|| in the measurement norm.

    Evaluated entirely in reduced quantities: for the orthonormal basis
    the Gram matrix is the identity, so the squared norm is
    c^T c - 2 c^T b1 + n0 (masked Gram variant with a mask); tiny
    negative round-off under the square root is clamped to zero.
    """
    c = np.asarray(coeffs, dtype=float)
    if model.mask is None:
        val = c @ c - 2.0 * (c @ model.b1) + model.n0
    else:
        val = c @ (model.g1m @ c) - 2.0 * (c @ model.b1m) + model.n0
    return float(np.sqrt(max(val, 0.0)))


def reduced_update(model, sigma):
    """Reduced Landweber ingredient: update direction and misfit.

    Returns (s, reduced_residual_norm) with
    s_k = c^T (V1^T B^k V2) d, the reduced counterpart of the adjoint
    pairing; cost scales with p * N1 * N2, independent of the mesh.
    """
    c = reduced_forward(model, sigma)
    d = reduced_dual(model, sigma, c)
    s = np.einsum("i,kij,j->k", c, model.qk, d)
    return s, residual_norm(model, c)


def error_estimator(model, workspace, sigma, coeffs):
    """Rigorous bound for ||F(sigma) - F_N(sigma)||_L2.

    Assembles the full-order residual r = f - B(sigma) V1 c of the
    reduced solution (the documented full-order exception), computes its
    Riesz representative M v_r = r and returns ||v_r|| / alpha(sigma).
    """
    sigma = check_admissible(model.cs, sigma)
    u_n = model.v1 @ np.asarray(coeffs, dtype=float)
    r = model.cs.load - model.cs.apply_weighted(sigma, u_n)
    v_r = workspace.mass_solve(r)
    return float(np.sqrt(max(v_r @ r, 0.0))) / coercivity_bound(sigma)


def error_estimator_gram(model, sigma, coeffs):
    """Estimator via the offline residual Gram matrix.

    Equivalent to ``error_estimator`` but assembled from the
    precomputed Gram matrix of residual components; requires the model
    to be built with ``track_residual_gram`` (practical for small p).
    """
    if not model.track_residual_gram:
        raise ValueError("model was built without the residual Gram decomposition")
    sigma = check_admissible(model.cs, sigma)
    c = np.asarray(coeffs, dtype=float)
    theta = np.empty(1 + model.cs.p * model.n1)
    theta[0] = 1.0
    blocks = np.outer(c, sigma)  # component for B^k psi_i enters as sigma_k c_i
    theta[1:] = blocks.ravel()
    val = theta @ (model.gram_r @ theta)
    return float(np.sqrt(max(val, 0.0))) / coercivity_bound(sigma)
