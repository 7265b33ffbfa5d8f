"""P1 finite elements on a uniform triangulation of the unit square.

The mesh divides [0,1]^2 into (n+1)^2 squares of side h = 1/(n+1); every
square is split into two triangles by its lower-left to upper-right
diagonal.  Homogeneous Dirichlet conditions are built in: only the n^2
interior nodes carry degrees of freedom.  The diffusion coefficient is
piecewise constant on a q-by-q partition of the square into p = q^2
congruent subdomains, so the stiffness matrix splits into one component
per subdomain,

    B(sigma) = sum_k sigma_k B^k,

which is what every operation downstream relies on.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Grid",
    "Partition",
    "ComponentSystem",
    "SolverFailure",
    "make_grid",
    "make_partition",
    "assemble_components",
    "assemble_stiffness",
    "solve_sparse",
    "l2_inner",
    "l2_norm",
    "parameter_l2_norm",
    "check_admissible",
    "coercivity_bound",
    "continuity_bound",
]

# Local matrices for the two congruent triangle shapes (unit diffusion,
# to be scaled by the element area for the mass matrix).  Vertex order:
# lower triangle (a,b),(a+1,b),(a+1,b+1); upper triangle
# (a,b),(a+1,b+1),(a,b+1).
_K_LOWER = 0.5 * np.array([[1.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 1.0]])
_K_UPPER = 0.5 * np.array([[1.0, 0.0, -1.0], [0.0, 1.0, -1.0], [-1.0, -1.0, 2.0]])
_M_REF = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


class SolverFailure(RuntimeError):
    """Linear or nonlinear solve did not meet its tolerance.

    Carries the achieved residual so callers can report diagnostics.
    """

    def __init__(self, message, achieved=None):
        super().__init__(message)
        self.achieved = achieved


@dataclass(frozen=True)
class Grid:
    """Uniform grid with n interior nodes per direction, h = 1/(n+1)."""

    n: int

    @property
    def h(self):
        return 1.0 / (self.n + 1)

    @property
    def num_interior(self):
        return self.n * self.n

    @property
    def num_nodes(self):
        """Total node count including the boundary, (n+2)^2."""
        return (self.n + 2) ** 2

    def interior_coordinates(self):
        """Coordinates of the interior nodes, two length-n^2 arrays.

        The degree of freedom for the interior node with 0-based indices
        (i, j) sits at ((i+1)h, (j+1)h) and has flat index j*n + i.
        """
        t = (np.arange(self.n) + 1.0) * self.h
        x, y = np.meshgrid(t, t, indexing="xy")
        return x.ravel(), y.ravel()


@dataclass(frozen=True)
class Partition:
    """q-by-q partition of the unit square into p = q^2 subdomains.

    Subdomain k = jy*q + jx covers [jx/q,(jx+1)/q] x [jy/q,(jy+1)/q].
    The grid constraint (n+1) divisible by q keeps every subdomain a
    union of whole mesh squares, so element membership is unambiguous.
    """

    grid: Grid
    q: int

    @property
    def p(self):
        return self.q * self.q

    def centers(self):
        """Subdomain center coordinates, two length-p arrays."""
        t = (np.arange(self.q) + 0.5) / self.q
        x, y = np.meshgrid(t, t, indexing="xy")
        return x.ravel(), y.ravel()

    def subdomain_of(self, x, y):
        """Subdomain indices containing the points (x, y)."""
        jx = np.minimum((np.asarray(x) * self.q).astype(int), self.q - 1)
        jy = np.minimum((np.asarray(y) * self.q).astype(int), self.q - 1)
        return jy * self.q + jx


class ComponentSystem:
    """Assembled FEM data: stiffness components, mass matrix, load vector.

    Attributes
    ----------
    grid, partition : Grid, Partition
    components : list of csr_matrix
        B^k for k = 0..p-1, symmetric, one per subdomain; they sum to
        the unit-coefficient stiffness matrix.
    mass : csr_matrix
        Exact P1 mass matrix over the interior nodes.
    load : ndarray
        Load vector of the source term, f_i = -h^2 for every interior
        node (right-hand side f(w) = -int w dx).

    The flat triplet arrays (sorted by subdomain) back the vectorized
    sigma-weighted operations; they carry the same entries as
    ``components``.
    """

    def __init__(self, grid, partition, components, mass, load,
                 rows, cols, vals, keys, key_ptr):
        self.grid = grid
        self.partition = partition
        self.components = components
        self.mass = mass
        self.load = load
        self._rows = rows
        self._cols = cols
        self._vals = vals
        self._keys = keys
        self._key_ptr = key_ptr
        self._banded = None

    @property
    def p(self):
        return self.partition.p

    @property
    def dim(self):
        return self.grid.num_interior

    def apply_weighted(self, sigma, x):
        """Return B(sigma) @ x without assembling B(sigma)."""
        w = self._vals * sigma[self._keys]
        return np.bincount(self._rows, weights=w * x[self._cols],
                           minlength=self.dim)

    def component_pairings(self, u, v):
        """Return the length-p vector with entries u^T B^k v."""
        contrib = self._vals * u[self._rows] * v[self._cols]
        sums = np.bincount(self._keys, weights=contrib, minlength=self.p)
        return sums

    def component_products(self, x):
        """Return the list [B^k @ x for all k]."""
        return [bk @ x for bk in self.components]

    def banded_layout(self):
        """Assembly map into LAPACK upper-banded storage (lazy, cached).

        B(sigma) couples only the axis neighbors (the split-diagonal
        coupling vanishes element-wise), so the bandwidth equals n and
        banded Cholesky factorizations are cheap.  Returns
        (flat_positions, upper_vals, upper_keys, bandwidth).
        """
        if self._banded is None:
            up = self._cols >= self._rows
            ru, cu = self._rows[up], self._cols[up]
            bw = int((cu - ru).max()) if ru.size else 0
            flat = (bw + ru - cu) * self.dim + cu
            self._banded = (flat, self._vals[up], self._keys[up], bw)
        return self._banded


def make_grid(n):
    """Build the grid with n interior nodes per direction (n >= 2)."""
    if not isinstance(n, (int, np.integer)) or n < 2:
        raise ValueError(f"grid parameter n must be an integer >= 2, got {n!r}")
    return Grid(int(n))


def make_partition(grid, q):
    """Build the q-by-q coefficient partition; requires q | (n+1)."""
    if not isinstance(q, (int, np.integer)) or q < 1:
        raise ValueError(f"partition parameter q must be an integer >= 1, got {q!r}")
    if (grid.n + 1) % q != 0:
        raise ValueError(
            f"partition q={q} incompatible with grid n={grid.n}: "
            f"(n+1) = {grid.n + 1} is not divisible by q"
        )
    return Partition(grid, int(q))


def _triangle_arrays(grid):
    """Vertex index triples and barycenters for all triangles.

    Returns (verts_lower, verts_upper, bary_lower, bary_upper) where the
    verts arrays hold interior dof indices (-1 on the boundary).
    """
    n, h = grid.n, grid.h
    a, b = np.meshgrid(np.arange(n + 1), np.arange(n + 1), indexing="ij")
    a, b = a.ravel(), b.ravel()

    def dof(i, j):
        # node (i, j) with i, j in 0..n+1; interior iff 1 <= i, j <= n
        inside = (i >= 1) & (i <= n) & (j >= 1) & (j <= n)
        return np.where(inside, (j - 1) * n + (i - 1), -1)

    lower = [(a, b), (a + 1, b), (a + 1, b + 1)]
    upper = [(a, b), (a + 1, b + 1), (a, b + 1)]
    out = []
    for tri in (lower, upper):
        verts = np.stack([dof(i, j) for (i, j) in tri])
        xc = h * (tri[0][0] + tri[1][0] + tri[2][0]) / 3.0
        yc = h * (tri[0][1] + tri[1][1] + tri[2][1]) / 3.0
        out.append((verts, xc, yc))
    return out


def assemble_components(grid, partition):
    """Assemble stiffness components, mass matrix and load vector.

    All integrals are exact for P1 elements on the uniform mesh; the
    assembly order is fixed, so repeated calls produce bit-identical
    matrices.
    """
    if partition.grid != grid:
        raise ValueError("partition was built for a different grid")
    n, h = grid.n, grid.h
    dim = grid.num_interior
    area = 0.5 * h * h
    mass_local = area * _M_REF

    rows, cols, vals, keys = [], [], [], []
    mrows, mcols, mvals = [], [], []
    load = np.zeros(dim)
    for (verts, xc, yc), k_local in zip(_triangle_arrays(grid),
                                        (_K_LOWER, _K_UPPER)):
        sub = partition.subdomain_of(xc, yc)
        for li in range(3):
            gi = verts[li]
            inner_i = gi >= 0
            np.add.at(load, gi[inner_i], -area / 3.0)
            for lj in range(3):
                gj = verts[lj]
                ok = inner_i & (gj >= 0)
                rows.append(gi[ok])
                cols.append(gj[ok])
                vals.append(np.full(ok.sum(), k_local[li, lj]))
                keys.append(sub[ok])
                mrows.append(gi[ok])
                mcols.append(gj[ok])
                mvals.append(np.full(ok.sum(), mass_local[li, lj]))

    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    keys = np.concatenate(keys)
    # the split-diagonal couplings assemble to exact zeros; dropping them
    # keeps the matrices truly pentadiagonal (bandwidth n)
    nz = vals != 0.0
    rows, cols, vals, keys = rows[nz], cols[nz], vals[nz], keys[nz]
    order = np.argsort(keys, kind="stable")
    rows, cols, vals, keys = rows[order], cols[order], vals[order], keys[order]
    key_ptr = np.searchsorted(keys, np.arange(partition.p + 1))

    components = []
    for k in range(partition.p):
        sl = slice(key_ptr[k], key_ptr[k + 1])
        bk = sp.coo_matrix((vals[sl], (rows[sl], cols[sl])), shape=(dim, dim)).tocsr()
        bk.sum_duplicates()
        bk.sort_indices()
        components.append(bk)

    mass = sp.coo_matrix(
        (np.concatenate(mvals), (np.concatenate(mrows), np.concatenate(mcols))),
        shape=(dim, dim),
    ).tocsr()
    mass.sum_duplicates()
    mass.sort_indices()

    return ComponentSystem(grid, partition, components, mass, load,
                           rows, cols, vals, keys, key_ptr)


def check_admissible(cs, sigma):
    """Validate a coefficient vector: length p, strictly positive."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (cs.p,):
        raise ValueError(f"coefficient vector has shape {sigma.shape}, expected ({cs.p},)")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("coefficient vector contains non-finite entries")
    if sigma.min() <= 0.0:
        raise ValueError(
            f"coefficient vector leaves the admissible set: min value {sigma.min()} <= 0"
        )
    return sigma


def coercivity_bound(sigma):
    """Coercivity constant of b(.,.;sigma) w.r.t. the L2 norm.

    alpha(sigma) = 2 min(sigma), using the Poincare-Friedrichs constant
    1/sqrt(2) of the unit square.
    """
    return 2.0 * float(np.min(sigma))


def continuity_bound(sigma):
    """Continuity constant gamma(sigma) = max(sigma)."""
    return float(np.max(sigma))


def assemble_stiffness(cs, sigma):
    """Assemble B(sigma) = sum_k sigma_k B^k as a CSR matrix.

    Linear in sigma; no positivity check, so component extraction with
    unit vectors works too.
    """
    sigma = np.asarray(sigma, dtype=float)
    if sigma.shape != (cs.p,):
        raise ValueError(f"coefficient vector has shape {sigma.shape}, expected ({cs.p},)")
    w = cs._vals * sigma[cs._keys]
    mat = sp.coo_matrix((w, (cs._rows, cs._cols)), shape=(cs.dim, cs.dim)).tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return mat


def solve_sparse(a_mat, rhs, tol=1e-12, maxiter=None):
    """Solve the SPD system a_mat x = rhs by Jacobi-preconditioned CG.

    Stops once the true relative residual satisfies
    ||a_mat x - rhs||_2 <= tol ||rhs||_2 (verified, not just the CG
    recursion residual).  rhs = 0 returns the zero vector.

    Raises
    ------
    SolverFailure
        If the tolerance is not met within the iteration cap
        (default 50 * sqrt(dim), i.e. 50n for an n^2 grid system).
    """
    rhs = np.asarray(rhs, dtype=float)
    dim = rhs.shape[0]
    if maxiter is None:
        maxiter = 50 * max(int(np.ceil(np.sqrt(dim))), 1)
    bnorm = np.linalg.norm(rhs)
    x = np.zeros(dim)
    if bnorm == 0.0:
        return x
    diag = a_mat.diagonal()
    if np.any(diag <= 0.0):
        raise ValueError("matrix has non-positive diagonal entries; not SPD")

    r = rhs - a_mat @ x
    z = r / diag
    p = z.copy()
    rz = r @ z
    target = tol * bnorm
    for _ in range(maxiter):
        ap = a_mat @ p
        pap = p @ ap
        if pap <= 0.0:
            raise SolverFailure("CG breakdown: matrix not positive definite",
                                achieved=np.linalg.norm(r) / bnorm)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        if np.linalg.norm(r) <= target:
            # guard against recursion-residual drift
            r = rhs - a_mat @ x
            if np.linalg.norm(r) <= target:
                return x
        z = r / diag
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverFailure(
        f"CG did not reach relative residual {tol:g} in {maxiter} iterations",
        achieved=np.linalg.norm(rhs - a_mat @ x) / bnorm,
    )


def l2_inner(cs, u, v):
    """L2(Omega) inner product of two P1 functions, u^T M v."""
    return float(u @ (cs.mass @ v))


def l2_norm(cs, u):
    """L2(Omega) norm of a P1 function."""
    return float(np.sqrt(max(l2_inner(cs, u, u), 0.0)))


def parameter_l2_norm(values):
    """L2(Omega) norm of a piecewise constant field on the partition.

    Subdomains are congruent with area 1/p, so this is the root mean
    square of the values.
    """
    values = np.asarray(values, dtype=float)
    return float(np.sqrt(np.mean(values * values)))
