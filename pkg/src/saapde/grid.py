"""Uniform P1 finite elements on the unit square with homogeneous Dirichlet data.

The mesh is the structured triangulation of (0,1)^2 obtained by splitting
every square cell of an n-by-n grid along the same diagonal.  With the
right-angle vertex listed first, every triangle has the reference element
stiffness

    [[ 1.0, -0.5, -0.5],
     [-0.5,  0.5,  0.0],
     [-0.5,  0.0,  0.5]]

independent of the mesh width, so the constant-coefficient stiffness matrix
is the classical 5-point stencil {4, -1, -1, -1, -1}.  Coefficients are
piecewise constant per triangle (sampled at centroids) and the mass matrix
is row-sum lumped, which gives the interior diagonal h^2.

States and adjoints live on interior nodes (length (n-1)^2); controls and
loads live on all (n+1)^2 nodes.  All assembled operators are immutable
after construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import CoefficientBoundError, NonConvergenceError

# Reference P1 stiffness for a right triangle with legs h, right-angle
# vertex first.  The h factors cancel in two dimensions.
REF_STIFFNESS = np.array(
    [
        [1.0, -0.5, -0.5],
        [-0.5, 0.5, 0.0],
        [-0.5, 0.0, 0.5],
    ]
)


@dataclass(frozen=True)
class AssemblyPattern:
    """Fixed CSR sparsity plus the cell-to-data map for one node set.

    ``emap`` is a sparse (nnz, ncells) matrix such that the CSR ``data``
    of the stiffness matrix for cellwise coefficients ``kappa`` is
    ``emap @ kappa``.  The map is shared by every scenario, so batches of
    matrices differ only in their data rows.
    """

    node_ids: np.ndarray        # global node id per local dof
    indices: np.ndarray
    indptr: np.ndarray
    diag_slots: np.ndarray      # position of (i, i) inside data, per row i
    emap: sp.csr_matrix

    @property
    def dim(self) -> int:
        return self.indptr.shape[0] - 1

    def data_for(self, kappa_cells: np.ndarray) -> np.ndarray:
        """CSR data for cell coefficients, batched in the trailing axis.

        ``kappa_cells`` has shape (ncells,) or (ncells, B); the result has
        shape (nnz,) or (nnz, B) and is bitwise identical whether built one
        scenario at a time or as a batch.
        """
        return self.emap @ kappa_cells


class Grid2D:
    """Friedrichs-Keller triangulation of the unit square with n cells per side."""

    def __init__(self, n: int):
        if n < 2:
            raise ValueError("need n >= 2 for at least one interior node")
        self.n = int(n)
        self.h = 1.0 / self.n

        side = self.n + 1
        ij = np.arange(side)
        xx, yy = np.meshgrid(ij, ij, indexing="xy")
        # node id = j*(n+1) + i for lattice point (i, j)
        self.nodes = np.column_stack([xx.ravel() * self.h, yy.ravel() * self.h])

        i, j = np.meshgrid(np.arange(self.n), np.arange(self.n), indexing="ij")
        i = i.ravel()
        j = j.ravel()
        nid = lambda a, b: b * side + a  # noqa: E731
        lower = np.column_stack([nid(i, j), nid(i + 1, j), nid(i, j + 1)])
        upper = np.column_stack([nid(i + 1, j + 1), nid(i + 1, j), nid(i, j + 1)])
        # right-angle vertex first in both orientations
        self.cells = np.vstack([lower, upper]).astype(np.int64)
        self.cell_centroids = self.nodes[self.cells].mean(axis=1)

        on_boundary = (
            (xx.ravel() == 0)
            | (xx.ravel() == self.n)
            | (yy.ravel() == 0)
            | (yy.ravel() == self.n)
        )
        self.interior_ids = np.flatnonzero(~on_boundary)
        self.interior_index = np.full(side * side, -1, dtype=np.int64)
        self.interior_index[self.interior_ids] = np.arange(self.interior_ids.size)

    @property
    def num_nodes(self) -> int:
        return (self.n + 1) ** 2

    @property
    def num_interior(self) -> int:
        return (self.n - 1) ** 2

    @property
    def num_cells(self) -> int:
        return 2 * self.n * self.n

    def __repr__(self):
        return f"Grid2D(n={self.n})"

    # -- assembly patterns ------------------------------------------------

    def _build_pattern(self, dirichlet: bool) -> AssemblyPattern:
        if dirichlet:
            local = self.interior_index[self.cells]   # (ncells, 3), -1 on boundary
            node_ids = self.interior_ids
        else:
            local = self.cells
            node_ids = np.arange(self.num_nodes)
        dim = node_ids.size

        rows, cols, vals, cellidx = [], [], [], []
        ncells = self.cells.shape[0]
        cell_range = np.arange(ncells)
        for a in range(3):
            for b in range(3):
                if REF_STIFFNESS[a, b] == 0.0:
                    continue
                r = local[:, a]
                c = local[:, b]
                keep = (r >= 0) & (c >= 0)
                rows.append(r[keep])
                cols.append(c[keep])
                vals.append(np.full(keep.sum(), REF_STIFFNESS[a, b]))
                cellidx.append(cell_range[keep])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        vals = np.concatenate(vals)
        cellidx = np.concatenate(cellidx)

        pattern = sp.coo_matrix(
            (np.ones_like(vals), (rows, cols)), shape=(dim, dim)
        ).tocsr()
        pattern.sum_duplicates()
        pattern.sort_indices()
        indices, indptr = pattern.indices.copy(), pattern.indptr.copy()

        # slot of each (row, col) entry inside the canonical CSR data array
        slot_of = {}
        for r in range(dim):
            for k in range(indptr[r], indptr[r + 1]):
                slot_of[(r, indices[k])] = k
        slots = np.fromiter(
            (slot_of[(r, c)] for r, c in zip(rows, cols)), dtype=np.int64, count=rows.size
        )
        emap = sp.csr_matrix(
            (vals, (slots, cellidx)), shape=(indices.size, ncells)
        )
        emap.sum_duplicates()
        emap.sort_indices()

        diag_slots = np.fromiter(
            (slot_of[(r, r)] for r in range(dim)), dtype=np.int64, count=dim
        )
        return AssemblyPattern(
            node_ids=node_ids,
            indices=indices,
            indptr=indptr,
            diag_slots=diag_slots,
            emap=emap,
        )

    @cached_property
    def pattern_interior(self) -> AssemblyPattern:
        return self._build_pattern(dirichlet=True)

    @cached_property
    def pattern_full(self) -> AssemblyPattern:
        return self._build_pattern(dirichlet=False)

    @cached_property
    def lumped_mass_interior(self) -> np.ndarray:
        return self._lumped_diag()[self.interior_ids]

    @cached_property
    def lumped_mass_full(self) -> np.ndarray:
        return self._lumped_diag()

    def _lumped_diag(self) -> np.ndarray:
        # row sums of the consistent P1 mass matrix: area/3 per adjacent cell
        diag = np.zeros(self.num_nodes)
        np.add.at(diag, self.cells.ravel(), self.h * self.h / 6.0)
        return diag

    @cached_property
    def unit_stiffness_interior(self) -> "SparseOperator":
        ones = np.ones(self.num_cells)
        return SparseOperator.from_pattern(self.pattern_interior, ones)

    @cached_property
    def unit_seminorm_full(self) -> "SparseOperator":
        ones = np.ones(self.num_cells)
        return SparseOperator.from_pattern(self.pattern_full, ones)

    @cached_property
    def unit_stiffness_splu(self):
        """SuperLU factorization of the kappa=1 interior stiffness."""
        return spla.splu(self.unit_stiffness_interior.csr.tocsc())

    # -- node set helpers --------------------------------------------------

    def embed_interior(self, interior_values: np.ndarray) -> np.ndarray:
        """Zero-extend interior nodal values to the full node set."""
        full = np.zeros(interior_values.shape[:-1] + (self.num_nodes,))
        full[..., self.interior_ids] = interior_values
        return full

    def restrict_interior(self, full_values: np.ndarray) -> np.ndarray:
        return full_values[..., self.interior_ids]

    def cell_average_to_nodes(self, cell_values: np.ndarray) -> np.ndarray:
        """Lumped L2 projection of a cellwise field onto nodal P1 values.

        Convex combination of adjacent cell values, so pointwise bounds of
        the cell field are preserved.
        """
        num = np.zeros(cell_values.shape[:-1] + (self.num_nodes,))
        w = self.h * self.h / 6.0
        np.add.at(
            num,
            (..., self.cells.ravel()),
            np.repeat(cell_values, 3, axis=-1) * w,
        )
        return num / self.lumped_mass_full


@dataclass(frozen=True)
class GridFunction:
    """Nodal scalar field; interior-only when ``dirichlet`` is set."""

    grid: Grid2D
    values: np.ndarray
    dirichlet: bool = True

    def __post_init__(self):
        expected = self.grid.num_interior if self.dirichlet else self.grid.num_nodes
        if self.values.shape != (expected,):
            raise ValueError(
                f"values have shape {self.values.shape}, expected ({expected},)"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("grid function contains non-finite values")

    @staticmethod
    def from_callable(grid: Grid2D, f, dirichlet: bool = True) -> "GridFunction":
        coords = grid.nodes[grid.interior_ids] if dirichlet else grid.nodes
        return GridFunction(grid, f(coords[:, 0], coords[:, 1]), dirichlet)

    @staticmethod
    def zeros(grid: Grid2D, dirichlet: bool = True) -> "GridFunction":
        m = grid.num_interior if dirichlet else grid.num_nodes
        return GridFunction(grid, np.zeros(m), dirichlet)


@dataclass(frozen=True)
class CellField:
    """One value per triangle; used for diffusion and reaction coefficients."""

    grid: Grid2D
    values: np.ndarray
    min_allowed: float | None = None

    def __post_init__(self):
        if self.values.shape != (self.grid.num_cells,):
            raise ValueError("cell field length does not match grid")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("cell field contains non-finite values")
        if self.min_allowed is not None and self.values.min() < self.min_allowed:
            raise CoefficientBoundError(
                f"cell field drops to {self.values.min()}, "
                f"below the declared bound {self.min_allowed}"
            )


@dataclass(frozen=True)
class SparseOperator:
    """Symmetric sparse matrix in CSR layout."""

    csr: sp.csr_matrix
    diag_slots: np.ndarray = field(repr=False, default=None)

    @property
    def dim(self) -> int:
        return self.csr.shape[0]

    @staticmethod
    def from_pattern(pattern: AssemblyPattern, kappa_cells: np.ndarray) -> "SparseOperator":
        data = pattern.data_for(kappa_cells)
        csr = sp.csr_matrix(
            (data, pattern.indices.copy(), pattern.indptr.copy()),
            shape=(pattern.dim, pattern.dim),
        )
        return SparseOperator(csr=csr, diag_slots=pattern.diag_slots.copy())

    @staticmethod
    def diagonal(diag: np.ndarray) -> "SparseOperator":
        n = diag.shape[0]
        csr = sp.csr_matrix(
            (diag.astype(float), np.arange(n), np.arange(n + 1)), shape=(n, n)
        )
        return SparseOperator(csr=csr, diag_slots=np.arange(n))

    def matvec(self, x: np.ndarray) -> np.ndarray:
        return self.csr @ x

    def diagonal_values(self) -> np.ndarray:
        return self.csr.diagonal()

    def to_dense(self) -> np.ndarray:
        return self.csr.toarray()


# -- operations ------------------------------------------------------------


def assemble_stiffness(grid: Grid2D, kappa: CellField) -> SparseOperator:
    """Interior-node stiffness matrix for cellwise diffusion ``kappa``."""
    if kappa.values.min() <= 0.0:
        raise CoefficientBoundError(
            f"diffusion field must be positive on every cell "
            f"(min = {kappa.values.min()})"
        )
    return SparseOperator.from_pattern(grid.pattern_interior, kappa.values)


def assemble_lumped_mass(grid: Grid2D, dirichlet: bool = True) -> SparseOperator:
    """Row-sum lumped P1 mass matrix (diagonal)."""
    diag = grid.lumped_mass_interior if dirichlet else grid.lumped_mass_full
    return SparseOperator.diagonal(diag)


def solve_spd(A: SparseOperator, rhs: np.ndarray, tol: float = 1e-10,
              maxiter: int | None = None) -> np.ndarray:
    """Diagonally preconditioned CG solve of A x = rhs.

    Returns x with ||A x - rhs||_2 <= tol * ||rhs||_2.  Deterministic for
    fixed inputs; raises :class:`NonConvergenceError` at the iteration cap.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = A.dim
    if maxiter is None:
        maxiter = 10 * m
    rhs = np.asarray(rhs, dtype=float)
    bnorm = np.linalg.norm(rhs)
    if bnorm == 0.0:
        return np.zeros(m)
    target = tol * bnorm

    dinv = 1.0 / A.diagonal_values()
    x = np.zeros(m)
    r = rhs.copy()
    z = dinv * r
    p = z.copy()
    rz = r @ z
    for _ in range(maxiter):
        if np.linalg.norm(r) <= target:
            return x
        Ap = A.matvec(p)
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        z = dinv * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    resid = np.linalg.norm(r)
    if resid <= target:
        return x
    raise NonConvergenceError(
        f"CG did not converge in {maxiter} iterations "
        f"(residual {resid:.3e}, target {target:.3e})",
        residual=resid,
    )


def norms(f: GridFunction) -> tuple[float, float]:
    """Lumped L2 norm and H1 (semi)norm of a grid function.

    Dirichlet functions use the interior operators; all-node functions use
    the full lumped mass and the no-boundary-condition seminorm stiffness.
    """
    g = f.grid
    v = f.values
    if f.dirichlet:
        mass = g.lumped_mass_interior
        stiff = g.unit_stiffness_interior
    else:
        mass = g.lumped_mass_full
        stiff = g.unit_seminorm_full
    l2 = float(np.sqrt(v @ (mass * v)))
    h01 = float(np.sqrt(max(v @ stiff.matvec(v), 0.0)))
    return l2, h01


@dataclass(frozen=True)
class GridConstants:
    """Discrete Friedrichs and H01->L4 embedding constants."""

    C_D: float
    C_H01_L4: float
    lambda_min: float


def estimate_constants(grid: Grid2D, seed: int = 1234) -> GridConstants:
    """Estimate C_D = 1/sqrt(lambda_min(A1, M)) and the discrete H01->L4 constant.

    lambda_min comes from inverse power iteration on the pencil
    (stiffness, lumped mass) to relative tolerance 1e-8; the embedding
    constant from projected gradient ascent of ||v||_L4 / ||v||_H01 with
    20 fixed-seed restarts.
    """
    A1 = grid.unit_stiffness_interior
    mass = grid.lumped_mass_interior
    m = grid.num_interior

    x = np.ones(m)
    x /= np.sqrt(x @ (mass * x))
    lam_prev = np.inf
    lam = None
    for _ in range(400):
        y = solve_spd(A1, mass * x, tol=1e-12)
        x = y / np.sqrt(y @ (mass * y))
        lam = float(x @ A1.matvec(x)) / float(x @ (mass * x))
        if abs(lam - lam_prev) <= 1e-8 * abs(lam):
            break
        lam_prev = lam
    else:
        raise NonConvergenceError(
            "inverse power iteration stagnated", residual=abs(lam - lam_prev)
        )
    c_d = 1.0 / np.sqrt(lam)

    c_l4 = _ascend_l4_quotient(grid, seed=seed, restarts=20)
    return GridConstants(C_D=float(c_d), C_H01_L4=float(c_l4), lambda_min=float(lam))


def _ascend_l4_quotient(grid: Grid2D, seed: int, restarts: int) -> float:
    """Maximize the lumped-quadrature L4 / H01 quotient over interior fields."""
    A1 = grid.unit_stiffness_interior
    mass = grid.lumped_mass_interior
    rng = np.random.default_rng(seed)
    m = grid.num_interior

    def quotient(v):
        l4 = (mass @ (v ** 4)) ** 0.25
        h01 = np.sqrt(v @ A1.matvec(v))
        return l4 / h01

    best = 0.0
    for _ in range(restarts):
        v = rng.standard_normal(m)
        v /= np.sqrt(v @ A1.matvec(v))
        q = quotient(v)
        step = 0.5
        for _ in range(400):
            l4_4 = mass @ (v ** 4)
            l4 = l4_4 ** 0.25
            grad_l4 = (mass * v ** 3) / l4 ** 3
            grad_h01 = A1.matvec(v)  # h01(v) = 1 after normalization
            grad_q = grad_l4 - l4 * grad_h01
            w = v + step * grad_q
            w /= np.sqrt(w @ A1.matvec(w))
            q_new = quotient(w)
            if q_new > q:
                v, q = w, q_new
                step *= 1.2
            else:
                step *= 0.5
                if step < 1e-12:
                    break
        best = max(best, q)
    return best
