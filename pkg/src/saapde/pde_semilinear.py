"""State, adjoint and control gradient for the semilinear model.

Discrete state equation on interior nodes, with lumped mass M and cellwise
diffusion:

    A(xi) y + M y^3 = M (u + b(xi)),

where the cubic acts nodewise.  The reaction monotonicity makes the root
unique and damped Newton globally convergent.  The adjoint linearization

    (A(xi) + 3 M diag(y^2)) z = -M (y - y_d)

is symmetric positive definite, and the tracking objective value and
gradient follow the adjoint identity: the control gradient is -z extended
by zero to the control nodes.

Batches are scenario-major: states, loads and gradients carry one scenario
per row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._batch import BatchedSpd, WorkCounter
from .errors import NonConvergenceError
from .grid import Grid2D, GridFunction
from .random_field import FieldSpec, ParamVector, ScenarioSet, sample_fields_batch


def default_target(grid: Grid2D, amplitude: float = 0.1) -> GridFunction:
    """Tracking target amplitude*sin(pi x1)*sin(pi x2) on interior nodes."""
    return GridFunction.from_callable(
        grid,
        lambda x1, x2: amplitude * np.sin(np.pi * x1) * np.sin(np.pi * x2),
        dirichlet=True,
    )


@dataclass(frozen=True)
class SemilinearProblem:
    """Immutable problem data for the cubic-reaction tracking model."""

    grid: Grid2D
    fields: FieldSpec
    y_d: GridFunction
    beta: float = 0.5            # risk level of the outer average value-at-risk
    newton_tol: float = 1e-10
    newton_max: int = 50
    damping_min: float = 2.0 ** -20

    def __post_init__(self):
        if not self.y_d.dirichlet or self.y_d.grid is not self.grid:
            raise ValueError("y_d must be an interior function on the problem grid")
        if not (0.0 < self.beta < 1.0):
            raise ValueError("beta must lie in (0, 1)")
        if self.newton_tol <= 0:
            raise ValueError("newton_tol must be positive")

    def batch(self, scen: ScenarioSet | np.ndarray) -> "SemilinearBatch":
        xis = scen.points if isinstance(scen, ScenarioSet) else np.asarray(scen)
        return SemilinearBatch(self, xis)


class SemilinearBatch:
    """Per-scenario operators for a fixed set of parameter vectors."""

    def __init__(self, prob: SemilinearProblem, xis: np.ndarray):
        self.prob = prob
        grid = prob.grid
        kappa, _g, b = sample_fields_batch(prob.fields, xis, grid)
        self.A = BatchedSpd.stiffness(grid, kappa)
        self.mass = grid.lumped_mass_interior          # (m,)
        self.b_int = grid.restrict_interior(b)         # (B, m)
        self.batch_size = xis.shape[0]

    def _rhs(self, u_full: np.ndarray) -> np.ndarray:
        u_int = self.prob.grid.restrict_interior(u_full)
        return self.mass * (u_int + self.b_int)

    def solve_states(
        self,
        u_full: np.ndarray,
        y0: np.ndarray | None = None,
        work: WorkCounter | None = None,
    ) -> np.ndarray:
        """Damped Newton solve of the state batch; returns y of shape (B, m).

        The initial iterate is the linear problem's solution (cubic dropped)
        unless a warm start ``y0`` is supplied.  The nonlinear residual
        decreases strictly on every accepted step.
        """
        prob = self.prob
        rhs = self._rhs(u_full)
        if y0 is None:
            y = self.A.factor(work=work).solve(rhs)
        else:
            y = y0.copy()

        def residual(v):
            return self.A.matvec(v) + self.mass * v ** 3 - rhs

        F = residual(y)
        res = np.sqrt(np.sum(F * F, axis=1))
        for _ in range(prob.newton_max):
            conv = res <= prob.newton_tol
            if conv.all():
                return y
            F_rhs = np.where(conv[:, None], 0.0, -F)
            fac = self.A.factor(3.0 * self.mass * y * y, work=work)
            s = fac.solve(F_rhs)

            alpha = np.where(conv, 0.0, 1.0)[:, None]
            trial = y + alpha * s
            F_trial = residual(trial)
            res_trial = np.sqrt(np.sum(F_trial * F_trial, axis=1))
            stuck = ~conv & (res_trial >= res)
            while stuck.any():
                alpha = np.where(stuck[:, None], 0.5 * alpha, alpha)
                if alpha[stuck].max() < prob.damping_min:
                    raise NonConvergenceError(
                        "Newton damping reached its floor without descent",
                        residual=float(res_trial[stuck].max()),
                    )
                trial = y + alpha * s
                F_trial = residual(trial)
                res_trial = np.sqrt(np.sum(F_trial * F_trial, axis=1))
                stuck = ~conv & (res_trial >= res)
            y = trial
            F = F_trial
            res = np.where(conv, res, res_trial)
        conv = res <= prob.newton_tol
        if conv.all():
            return y
        raise NonConvergenceError(
            f"Newton cap of {prob.newton_max} iterations exceeded "
            f"(worst residual {float(res.max()):.3e})",
            residual=float(res.max()),
        )

    def solve_adjoints(
        self, y: np.ndarray, work: WorkCounter | None = None
    ) -> np.ndarray:
        """SPD adjoint solves at given states; returns z of shape (B, m)."""
        fac = self.A.factor(3.0 * self.mass * y * y, work=work)
        rhs = -self.mass * (y - self.prob.y_d.values)
        return fac.solve(rhs)

    def values(self, y: np.ndarray) -> np.ndarray:
        """Tracking values 0.5*||y - y_d||_L2^2 per scenario."""
        d = y - self.prob.y_d.values
        return 0.5 * np.sum(self.mass * d * d, axis=1)

    def values_and_grads(
        self,
        u_full: np.ndarray,
        y0: np.ndarray | None = None,
        work: WorkCounter | None = None,
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Values, control gradients (B, nodes) and states for one control.

        Gradients are the zero-extended -z per scenario, the L2
        representative of the adjoint identity.
        """
        grid = self.prob.grid
        y = self.solve_states(u_full, y0=y0, work=work)
        z = self.solve_adjoints(y, work=work)
        grads = np.zeros((self.batch_size, grid.num_nodes))
        grads[:, grid.interior_ids] = -z
        return self.values(y), grads, y


# -- single-scenario operations ---------------------------------------------


def _as_xi_row(xi) -> np.ndarray:
    x = xi.components if isinstance(xi, ParamVector) else np.asarray(xi, dtype=float)
    return x[None, :]


def solve_state(prob: SemilinearProblem, u: GridFunction, xi) -> GridFunction:
    """State for one (u, xi); discrete residual below ``prob.newton_tol``."""
    batch = prob.batch(_as_xi_row(xi))
    y = batch.solve_states(u.values)
    return GridFunction(prob.grid, y[0], dirichlet=True)


def solve_adjoint(
    prob: SemilinearProblem, u: GridFunction, xi, y: GridFunction
) -> GridFunction:
    """Adjoint state for one (u, xi) at the given state."""
    batch = prob.batch(_as_xi_row(xi))
    z = batch.solve_adjoints(y.values[None, :])
    return GridFunction(prob.grid, z[0], dirichlet=True)


def grad_Jhat(prob: SemilinearProblem, u: GridFunction, xi) -> tuple[float, GridFunction]:
    """Inner objective value and its L2 control gradient for one scenario."""
    batch = prob.batch(_as_xi_row(xi))
    values, grads, _y = batch.values_and_grads(u.values)
    return float(values[0]), GridFunction(prob.grid, grads[0], dirichlet=False)
