"""State, adjoint, gradient and subgradient representative for the bilinear model.

The control multiplies a nonnegative reaction weight g(xi):

    A(xi) y + M diag(g u) y = M b(xi),

with g mapped from cells to nodes by the lumped L2 projection (a convex
combination, so sign and bounds survive).  Solvability away from the
admissible box is protected by the delta-neighborhood guard: controls may
stray from the box in L2 by strictly less than

    delta = kappa_min / (2 g_max C_{H01,L4}^2),

and the solver refuses anything beyond 0.9*delta, which keeps a coercivity
margin of kappa_min/2 against the unit stiffness.  The margin is spot
checked on fixed probe vectors at every state solve.

The gradient of p_xi(u) = J(S(u, xi)) is the nodal product g*y*z; its H1
norm is recorded per scenario as the size of the compact-factorization
image used in the boundedness diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._batch import BatchedSpd, WorkCounter
from .errors import OutOfNeighborhoodError
from .grid import Grid2D, GridConstants, GridFunction, estimate_constants
from .random_field import FieldSpec, ParamVector, ScenarioSet, sample_fields_batch

GUARD_SAFETY = 0.9
_PROBE_SEED = 31415
_NUM_PROBES = 3


@dataclass(frozen=True)
class BilinearProblem:
    """Immutable problem data for the bilinear tracking model."""

    grid: Grid2D
    fields: FieldSpec
    y_d: GridFunction
    u_cap: GridFunction          # upper box bound, nonnegative, on all nodes
    alpha: float = 1e-2
    constants: GridConstants = None

    def __post_init__(self):
        if not self.y_d.dirichlet or self.y_d.grid is not self.grid:
            raise ValueError("y_d must be an interior function on the problem grid")
        if self.u_cap.dirichlet or self.u_cap.grid is not self.grid:
            raise ValueError("u_cap must live on all nodes of the problem grid")
        if self.u_cap.values.min() < 0.0:
            raise ValueError("u_cap must be nonnegative")
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if self.constants is None:
            object.__setattr__(self, "constants", estimate_constants(self.grid))

    @property
    def delta(self) -> float:
        """Well-posedness radius around the admissible box."""
        c = self.constants.C_H01_L4
        return self.fields.kappa_min / (2.0 * self.fields.g_max * c * c)

    def admissible_distance(self, u_full: np.ndarray) -> float:
        """Lumped L2 distance from the box [0, u_cap]."""
        proj = np.clip(u_full, 0.0, self.u_cap.values)
        d = u_full - proj
        return float(np.sqrt(d @ (self.grid.lumped_mass_full * d)))

    def check_guard(self, u_full: np.ndarray):
        dist = self.admissible_distance(u_full)
        if dist >= GUARD_SAFETY * self.delta:
            raise OutOfNeighborhoodError(
                f"control is {dist:.3e} from the admissible box; the "
                f"well-posedness guard allows less than "
                f"{GUARD_SAFETY * self.delta:.3e}"
            )

    def batch(self, scen: ScenarioSet | np.ndarray) -> "BilinearBatch":
        xis = scen.points if isinstance(scen, ScenarioSet) else np.asarray(scen)
        return BilinearBatch(self, xis)


class BilinearBatch:
    """Per-scenario operators for a fixed set of parameter vectors."""

    def __init__(self, prob: BilinearProblem, xis: np.ndarray):
        self.prob = prob
        grid = prob.grid
        kappa, g, b = sample_fields_batch(prob.fields, xis, grid)
        self.A = BatchedSpd.stiffness(grid, kappa)
        self.mass = grid.lumped_mass_interior                       # (m,)
        self.g_int = grid.restrict_interior(grid.cell_average_to_nodes(g))  # (B, m)
        self.rhs = self.mass * grid.restrict_interior(b)
        self.batch_size = xis.shape[0]
        rng = np.random.default_rng(_PROBE_SEED)
        self._probes = rng.standard_normal((_NUM_PROBES, grid.num_interior))
        a1 = grid.unit_stiffness_interior.csr
        self._probe_energy = np.sum(self._probes * (a1 @ self._probes.T).T, axis=1)

    def reaction_diag(self, u_full: np.ndarray) -> np.ndarray:
        """Diagonal M*g*u of the control-reaction term, per scenario (B, m)."""
        u_int = self.prob.grid.restrict_interior(u_full)
        return self.mass * self.g_int * u_int

    def _check_coercivity(self, reaction: np.ndarray):
        """Rayleigh margin of probe vectors against the unit stiffness."""
        margin = 0.5 * self.prob.fields.kappa_min
        for k in range(_NUM_PROBES):
            v = self._probes[k]
            quad = np.sum(v * self.A.matvec(v[None, :]), axis=1)
            quad += np.sum(reaction * v * v, axis=1)
            ratio = quad / self._probe_energy[k]
            if (ratio < margin * (1.0 - 1e-10)).any():
                raise OutOfNeighborhoodError(
                    f"coercivity margin violated: Rayleigh quotient "
                    f"{float(ratio.min()):.6e} < {margin:.6e}"
                )

    def factorize(self, u_full: np.ndarray, work: WorkCounter | None = None):
        """Guarded factorization of the state/adjoint operator for a control."""
        self.prob.check_guard(u_full)
        reaction = self.reaction_diag(u_full)
        self._check_coercivity(reaction)
        return self.A.factor(reaction, work=work)

    def solve_states(
        self,
        u_full: np.ndarray,
        factor=None,
        work: WorkCounter | None = None,
    ) -> np.ndarray:
        """States for one control against every scenario; shape (B, m)."""
        if factor is None:
            factor = self.factorize(u_full, work=work)
        return factor.solve(self.rhs)

    def solve_adjoints(
        self,
        u_full: np.ndarray,
        y: np.ndarray,
        factor=None,
        work: WorkCounter | None = None,
    ) -> np.ndarray:
        """Adjoint states; same operator as the state solve (self-adjoint)."""
        if factor is None:
            factor = self.factorize(u_full, work=work)
        rhs = -self.mass * (y - self.prob.y_d.values)
        return factor.solve(rhs)

    def values(self, y: np.ndarray) -> np.ndarray:
        d = y - self.prob.y_d.values
        return 0.5 * np.sum(self.mass * d * d, axis=1)

    def values_and_grads(
        self,
        u_full: np.ndarray,
        work: WorkCounter | None = None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Values, gradients (B, nodes), states, and H1 norms of g*y*z.

        One factorization serves both the state and the adjoint solve.
        """
        grid = self.prob.grid
        factor = self.factorize(u_full, work=work)
        y = self.solve_states(u_full, factor=factor, work=work)
        z = self.solve_adjoints(u_full, y, factor=factor, work=work)
        m_int = self.g_int * y * z
        grads = np.zeros((self.batch_size, grid.num_nodes))
        grads[:, grid.interior_ids] = m_int

        a1 = grid.unit_stiffness_interior.csr
        h01_sq = np.sum(m_int * (a1 @ m_int.T).T, axis=1)
        l2_sq = np.sum(self.mass * m_int * m_int, axis=1)
        m_h1 = np.sqrt(np.maximum(h01_sq, 0.0) + l2_sq)
        return self.values(y), grads, y, m_h1


# -- single-scenario operations ---------------------------------------------


def _as_xi_row(xi) -> np.ndarray:
    x = xi.components if isinstance(xi, ParamVector) else np.asarray(xi, dtype=float)
    return x[None, :]


def solve_state(prob: BilinearProblem, u: GridFunction, xi) -> GridFunction:
    batch = prob.batch(_as_xi_row(xi))
    y = batch.solve_states(u.values)
    return GridFunction(prob.grid, y[0], dirichlet=True)


def solve_adjoint(
    prob: BilinearProblem, u: GridFunction, xi, y: GridFunction
) -> GridFunction:
    batch = prob.batch(_as_xi_row(xi))
    z = batch.solve_adjoints(u.values, y.values[None, :])
    return GridFunction(prob.grid, z[0], dirichlet=True)


def grad_p(
    prob: BilinearProblem, u: GridFunction, xi
) -> tuple[float, GridFunction, float]:
    """Value, L2 gradient and H1 norm of the gradient representative."""
    batch = prob.batch(_as_xi_row(xi))
    values, grads, _y, m_h1 = batch.values_and_grads(u.values)
    return float(values[0]), GridFunction(prob.grid, grads[0], dirichlet=False), float(m_h1[0])


def self_bound_check(prob: BilinearProblem, y: GridFunction) -> tuple[float, float]:
    """Discrete H^{-1} norm squared of the objective derivative vs 2*C_D^2*J(y).

    The left side is r^T A1^{-1} r for the Riesz load r = M (y - y_d); the
    right side uses the discrete Friedrichs constant, so lhs <= rhs holds
    exactly up to solver tolerance.
    """
    grid = prob.grid
    d = y.values - prob.y_d.values
    r = grid.lumped_mass_interior * d
    w = grid.unit_stiffness_splu.solve(r)
    lhs = float(r @ w)
    j_val = 0.5 * float(d @ (grid.lumped_mass_interior * d))
    c_d = prob.constants.C_D
    rhs = 2.0 * c_d * c_d * j_val
    return lhs, rhs
