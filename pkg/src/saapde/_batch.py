"""Batched sparse operators and direct banded solves for scenario sets.

All per-scenario operators share the sparsity pattern of the 5-point
stiffness stencil, so a batch is one ``(B, nnz)`` data array over a single
index structure (batch-major: each scenario's data, band and vectors are
contiguous and cache-resident).

Linear systems are solved by a banded Cholesky factorization per scenario
(bandwidth n-1 on the lexicographic interior grid), run in parallel over
the batch with numba.  Scenarios are independent inside the kernels, so
results are bitwise deterministic regardless of thread scheduling.  The
factorization is exact up to roundoff, comfortably inside the relative
residual contract of the iterative reference solver in :mod:`saapde.grid`.

Work is tracked in scenario-solve units times the band size, a
deterministic cost proxy used for the sweep records' cost column.
"""

from __future__ import annotations

import numba
import numpy as np

from .errors import NonConvergenceError
from .grid import AssemblyPattern, Grid2D


class WorkCounter:
    """Accumulates deterministic solver work (scenario band-solve units)."""

    def __init__(self):
        self.scenario_cg_iters = 0

    def add(self, units: int):
        self.scenario_cg_iters += int(units)


@numba.njit(cache=True, parallel=True)
def _matvec_kernel(data, indices, indptr, x, out):
    B, m = out.shape
    for b in numba.prange(B):
        for i in range(m):
            s = 0.0
            for k in range(indptr[i], indptr[i + 1]):
                s += data[b, k] * x[b, indices[k]]
            out[b, i] = s


@numba.njit(cache=True, parallel=True, fastmath=True)
def _factor_kernel(ab, extra, L, ok):
    # ab: (B, m, bw+1) symmetric band, ab[b, i, d] = A[i, i-d]
    B, m, w1 = ab.shape
    bw = w1 - 1
    for b in numba.prange(B):
        good = True
        for i in range(m):
            kmin = i - bw if i >= bw else 0
            for k in range(kmin, i):
                c = i - k
                s = ab[b, i, c]
                # dot over the shared band tail, contiguous in the offset
                for tau in range(1, k - kmin + 1):
                    s -= L[b, i, c + tau] * L[b, k, tau]
                L[b, i, c] = s / L[b, k, 0]
            s = ab[b, i, 0] + extra[b, i]
            for tau in range(1, i - kmin + 1):
                s -= L[b, i, tau] * L[b, i, tau]
            if s <= 0.0:
                good = False
                s = 1.0
            L[b, i, 0] = np.sqrt(s)
        ok[b] = good


@numba.njit(cache=True, parallel=True, fastmath=True)
def _solve_kernel(L, rhs, out):
    B, m, w1 = L.shape
    bw = w1 - 1
    for b in numba.prange(B):
        for i in range(m):
            s = rhs[b, i]
            kmin = i - bw if i >= bw else 0
            for tau in range(1, i - kmin + 1):
                s -= L[b, i, tau] * out[b, i - tau]
            out[b, i] = s / L[b, i, 0]
        for i in range(m - 1, -1, -1):
            s = out[b, i]
            jmax = min(i + bw, m - 1)
            for j in range(i + 1, jmax + 1):
                s -= L[b, j, j - i] * out[b, j]
            out[b, i] = s / L[b, i, 0]


class BatchedSpd:
    """Batch of SPD matrices sharing one CSR pattern; data is (B, nnz)."""

    def __init__(self, pattern: AssemblyPattern, data: np.ndarray):
        self.indices = pattern.indices.astype(np.int64)
        self.indptr = pattern.indptr.astype(np.int64)
        self.diag_slots = pattern.diag_slots
        self.data = data
        self.dim = pattern.dim
        self.batch = data.shape[0]
        # lower-triangle band map for the direct solver
        rows = np.repeat(
            np.arange(self.dim, dtype=np.int64), np.diff(self.indptr)
        )
        cols = self.indices
        lower = cols <= rows
        self._band_rows = rows[lower]
        self._band_offsets = (rows - cols)[lower]
        self._band_slots = np.flatnonzero(lower)
        self.bandwidth = int(self._band_offsets.max())
        self._band_cache = None

    @staticmethod
    def stiffness(grid: Grid2D, kappa_cells: np.ndarray) -> "BatchedSpd":
        """Interior stiffness batch from cell coefficients (B, ncells)."""
        pattern = grid.pattern_interior
        data = np.ascontiguousarray((pattern.emap @ kappa_cells.T).T)
        return BatchedSpd(pattern, data)

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.ascontiguousarray(np.broadcast_to(x, (self.batch, self.dim)))
        out = np.empty((self.batch, self.dim))
        _matvec_kernel(self.data, self.indices, self.indptr, x, out)
        return out

    def diagonal(self) -> np.ndarray:
        return self.data[:, self.diag_slots]

    def band(self) -> np.ndarray:
        """Symmetric band storage (B, m, bw+1); ab[b, i, d] = A[i, i-d].

        Cached: the factorization kernel reads the band without writing it,
        so repeated factorizations with different diagonal shifts share it.
        """
        if self._band_cache is None:
            ab = np.zeros((self.batch, self.dim, self.bandwidth + 1))
            ab[:, self._band_rows, self._band_offsets] = self.data[:, self._band_slots]
            self._band_cache = ab
        return self._band_cache

    def factor(self, extra_diag: np.ndarray | None = None,
               work: WorkCounter | None = None) -> "BandedFactor":
        """Banded Cholesky of A + diag(extra_diag), per scenario."""
        ab = self.band()
        if extra_diag is None:
            extra = np.zeros((self.batch, self.dim))
        else:
            extra = np.ascontiguousarray(
                np.broadcast_to(extra_diag, (self.batch, self.dim))
            )
        L = np.zeros_like(ab)
        ok = np.empty(self.batch, dtype=np.bool_)
        _factor_kernel(ab, extra, L, ok)
        if not ok.all():
            raise NonConvergenceError(
                f"banded Cholesky failed on {int((~ok).sum())} scenario(s); "
                "operator is not positive definite"
            )
        if work is not None:
            work.add(self.batch * (self.bandwidth + 1))
        return BandedFactor(L, work)


class BandedFactor:
    """Cholesky band L per scenario; solve() applies forward/back substitution."""

    def __init__(self, L: np.ndarray, work: WorkCounter | None = None):
        self.L = L
        self._work = work

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        B, m, _ = self.L.shape
        rhs = np.ascontiguousarray(np.broadcast_to(rhs, (B, m)))
        out = np.empty((B, m))
        _solve_kernel(self.L, rhs, out)
        if self._work is not None:
            self._work.add(B)
        return out
