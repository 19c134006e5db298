"""Proximal (sub)gradient solver and stationarity residuals.

The composite objective is  f(u[, t]) + psi(u)  with psi the box-quadratic
regularizer handled exactly by its proximal map.  One iteration is

    u+ = prox_{gamma psi}(u - gamma g_u),

with g_u the fixed-selection subgradient of the sample average; for the
risk-averse problem the auxiliary t is re-minimized exactly by the sorted
quantile formula each iteration (optionally updated by a plain subgradient
step instead).

The stationarity residual reported to callers is always evaluated at a
fixed probe step:

    ||u - prox_psi(u - gamma_probe g_u)|| / gamma_probe + dist(0, t-slot),

computed from cold solves so that recomputing at the returned point
reproduces it exactly.  The default step size is the inverse of a
Gauss-Newton curvature estimate obtained by power iteration at the start
point, capped at 2/alpha, with optional Armijo backtracking on the
composite objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._batch import BatchedSpd, WorkCounter
from .grid import GridFunction
from .pde_bilinear import BilinearBatch, BilinearProblem
from .pde_semilinear import SemilinearBatch, SemilinearProblem
from .random_field import ScenarioSet
from .risk import (
    AvarPoint,
    RegularizerSpec,
    SubgradientElement,
    avar_empirical,
    avar_objective_from_values,
    avar_subgradient_from_values,
    default_kink_tol,
    interval_distance_to_zero,
    prox_psi,
)

ARMIJO_SIGMA = 1e-4


@dataclass(frozen=True)
class SolverConfig:
    """Step, stopping and multi-start settings for the proximal solver."""

    gamma: float | None = None       # None: 1 / (Gauss-Newton curvature estimate)
    step_mode: str = "fixed"         # "fixed" | "backtracking"
    max_iters: int = 3000
    eps_stat: float = 1e-6
    multistart: int = 3
    multistart_seed: int = 555
    t_update: str = "exact"          # "exact" | "prox"
    gamma_probe: float = 1.0

    def __post_init__(self):
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.eps_stat <= 0 or self.gamma_probe <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.step_mode not in ("fixed", "backtracking"):
            raise ValueError(f"unknown step mode {self.step_mode!r}")
        if self.t_update not in ("exact", "prox"):
            raise ValueError(f"unknown t update {self.t_update!r}")


@dataclass(frozen=True)
class StationaryPoint:
    """Solver output: point, certificate and provenance."""

    u: GridFunction
    t: float | None
    residual: float
    objective: float
    iterations: int
    converged: bool
    provenance: str
    gamma: float
    work_units: int = 0


def stationarity_residual(grad_or_subgrad, point, reg: RegularizerSpec,
                          gamma_probe: float) -> float:
    """Prox fixed-point defect plus the t-slot distance to zero.

    ``grad_or_subgrad`` is a :class:`SubgradientElement` (risk-averse) or a
    plain gradient :class:`GridFunction` (smooth); ``point`` is the matching
    :class:`AvarPoint` or :class:`GridFunction`.
    """
    if gamma_probe <= 0:
        raise ValueError("gamma_probe must be positive")
    if isinstance(grad_or_subgrad, SubgradientElement):
        g = grad_or_subgrad.g_u
        t_term = interval_distance_to_zero(grad_or_subgrad.t_interval)
    else:
        g = grad_or_subgrad
        t_term = 0.0
    u = point.u if isinstance(point, AvarPoint) else point
    step = prox_psi(reg, u.values - gamma_probe * g.values, gamma_probe)
    d = u.values - step
    mass = u.grid.lumped_mass_full if not u.dirichlet else u.grid.lumped_mass_interior
    return float(np.sqrt(d @ (mass * d))) / gamma_probe + t_term


# -- scenario evaluators ------------------------------------------------------


class _AvarEvaluator:
    kind = "semilinear-avar"

    def __init__(self, prob: SemilinearProblem, scen: ScenarioSet, reg: RegularizerSpec):
        self.prob = prob
        self.reg = reg
        self.batch = prob.batch(scen)
        self.weights = scen.weights
        self.grid = prob.grid
        self.mass_full = prob.grid.lumped_mass_full
        self.alpha = reg.alpha

    def full_eval(self, u, warm, work):
        values, grads, y = self.batch.values_and_grads(u, y0=warm, work=work)
        return values, grads, y

    def values_only(self, u, warm, work):
        y = self.batch.solve_states(u, y0=warm, work=work)
        return self.batch.values(y), y

    def combine(self, values, grads, t):
        kink = default_kink_tol(t)
        return avar_subgradient_from_values(
            values, grads, self.weights, t, self.prob.beta, kink, self.grid
        )

    def objective(self, values, t, u):
        smooth = avar_objective_from_values(values, self.weights, t, self.prob.beta)
        return smooth + self.reg.value(u, self.mass_full)

    def best_t(self, values):
        _, (t_lo, _hi) = avar_empirical(values, self.weights, self.prob.beta)
        return t_lo

    def gn_pieces(self, warm_state, subset: int):
        s = min(self.batch.batch_size, subset)
        y_sub = warm_state[:s]
        factor = _slice_batch(self.batch.A, s).factor(
            3.0 * self.batch.mass * y_sub * y_sub
        )
        d = np.ones((s, self.grid.num_interior))
        scale = 1.0 / (1.0 - self.prob.beta)
        return factor.solve, d, scale


class _BilinearEvaluator:
    kind = "bilinear"

    def __init__(self, prob: BilinearProblem, scen: ScenarioSet, reg: RegularizerSpec):
        self.prob = prob
        self.reg = reg
        self.batch = prob.batch(scen)
        self.weights = scen.weights
        self.grid = prob.grid
        self.mass_full = prob.grid.lumped_mass_full
        self.alpha = reg.alpha

    def full_eval(self, u, warm, work):
        values, grads, y, _m_h1 = self.batch.values_and_grads(u, work=work)
        return values, grads, y

    def values_only(self, u, warm, work):
        y = self.batch.solve_states(u, work=work)
        return self.batch.values(y), y

    def combine(self, values, grads, t):
        g = (grads * self.weights[:, None]).sum(axis=0)
        return GridFunction(self.grid, g, dirichlet=False)

    def objective(self, values, t, u):
        return float(self.weights @ values) + self.reg.value(u, self.mass_full)

    def best_t(self, values):
        return None

    def gn_pieces(self, warm_state, subset: int):
        # the reaction diagonal is nonnegative, so dropping it from the
        # operator only enlarges the curvature estimate (safe side)
        s = min(self.batch.batch_size, subset)
        factor = _slice_batch(self.batch.A, s).factor()
        d = self.batch.g_int[:s] * warm_state[:s]
        return factor.solve, d, 1.0


def _slice_batch(op: BatchedSpd, s: int) -> BatchedSpd:
    out = BatchedSpd.__new__(BatchedSpd)
    out.indices = op.indices
    out.indptr = op.indptr
    out.diag_slots = op.diag_slots
    out.data = np.ascontiguousarray(op.data[:s])
    out.dim = op.dim
    out.batch = s
    out._band_rows = op._band_rows
    out._band_offsets = op._band_offsets
    out._band_slots = op._band_slots
    out.bandwidth = op.bandwidth
    out._band_cache = op.band()[:s]
    return out


def _estimate_curvature(ev, warm_state, work: WorkCounter, subset: int = 8,
                        iters: int = 8) -> float:
    """Largest eigenvalue of the Gauss-Newton surrogate, by power iteration.

    Operates in the lumped L2 inner product on control nodes; the estimate
    carries a 1.25 headroom factor for the truncated iteration.
    """
    solve_k, d, scale = ev.gn_pieces(warm_state, subset)
    grid = ev.grid
    mass_int = grid.lumped_mass_interior
    mass_full = ev.mass_full
    s = d.shape[0]
    w_sub = ev.weights[:s]
    w_sub = w_sub / w_sub.sum()

    def apply(h_full):
        h_int = grid.restrict_interior(h_full)
        t1 = mass_int * (d * h_int)
        t2 = solve_k(t1)
        t3 = mass_int * t2
        t4 = solve_k(t3)
        contrib = d * (mass_int * t4)
        acc = scale * (w_sub[:, None] * contrib).sum(axis=0)
        out = np.zeros(grid.num_nodes)
        out[grid.interior_ids] = acc
        return out / mass_full

    h = np.ones(grid.num_nodes)
    h /= np.sqrt(h @ (mass_full * h))
    lam = 0.0
    for _ in range(iters):
        Hh = apply(h)
        lam = float(h @ (mass_full * Hh))
        norm = np.sqrt(Hh @ (mass_full * Hh))
        if norm <= 1e-300:
            return 0.0
        h = Hh / norm
    return 1.25 * lam


def make_evaluator(problem, scen, reg):
    if isinstance(problem, SemilinearProblem):
        return _AvarEvaluator(problem, scen, reg)
    if isinstance(problem, BilinearProblem):
        return _BilinearEvaluator(problem, scen, reg)
    raise TypeError(f"unsupported problem type {type(problem)!r}")


def solve(
    problem,
    scen: ScenarioSet,
    reg: RegularizerSpec,
    cfg: SolverConfig,
    u0: GridFunction | None = None,
    t0: float = 0.0,
) -> StationaryPoint:
    """Run the proximal (sub)gradient iteration to eps_stat stationarity.

    Returns the best point flagged ``converged=False`` when the iteration
    cap is reached.  The reported residual is recomputed from cold solves
    at the returned point, so it is reproducible bit for bit.
    """
    ev = make_evaluator(problem, scen, reg)
    grid = ev.grid
    is_avar = ev.kind == "semilinear-avar"
    work = WorkCounter()

    if u0 is None:
        u = reg.clip(np.zeros(grid.num_nodes))
    else:
        u = reg.clip(u0.values.copy())
    t = float(t0)

    gamma = cfg.gamma
    gamma_cap = 2.0 / ev.alpha
    mode = cfg.step_mode
    warm = None
    best_u, best_t, best_res = u.copy(), t, np.inf
    res_cold = np.inf
    iterations = 0

    while iterations < cfg.max_iters:
        iterations += 1
        cold = warm is None
        values, grads, warm = ev.full_eval(u, warm, work)
        if is_avar and cfg.t_update == "exact":
            t = ev.best_t(values)
        sub = ev.combine(values, grads, t)
        if isinstance(sub, SubgradientElement):
            g = sub.g_u.values
            t_term = interval_distance_to_zero(sub.t_interval)
        else:
            g = sub.values
            t_term = 0.0

        step_probe = prox_psi(reg, u - cfg.gamma_probe * g, cfg.gamma_probe)
        d = u - step_probe
        res = float(np.sqrt(d @ (ev.mass_full * d))) / cfg.gamma_probe + t_term

        if res < best_res:
            best_u, best_t, best_res = u.copy(), t, res

        if res <= cfg.eps_stat:
            if cold:
                res_cold = res
                break
            # confirm with a cold evaluation before certifying
            values_c, grads_c, _ = ev.full_eval(u, None, work)
            if is_avar and cfg.t_update == "exact":
                t = ev.best_t(values_c)
            sub_c = ev.combine(values_c, grads_c, t)
            g_c = sub_c.g_u.values if isinstance(sub_c, SubgradientElement) else sub_c.values
            tt = (
                interval_distance_to_zero(sub_c.t_interval)
                if isinstance(sub_c, SubgradientElement)
                else 0.0
            )
            step_c = prox_psi(reg, u - cfg.gamma_probe * g_c, cfg.gamma_probe)
            dc = u - step_c
            res_cold = float(np.sqrt(dc @ (ev.mass_full * dc))) / cfg.gamma_probe + tt
            if res_cold <= cfg.eps_stat:
                values, g = values_c, g_c
                break

        if gamma is None:
            lam = _estimate_curvature(ev, warm, work)
            gamma = min(1.0 / lam, gamma_cap) if lam > 0 else gamma_cap

        if mode == "fixed" and iterations > 25 and res > 100.0 * max(best_res, cfg.eps_stat):
            # fixed step diverged; fall back to backtracking from the best point
            mode = "backtracking"
            u, t = best_u.copy(), best_t
            warm = None
            continue

        if is_avar and cfg.t_update == "prox":
            sel = 1.0 - float(
                (ev.weights * (np.asarray(values) - t > 0.0)).sum()
            ) / (1.0 - ev.prob.beta)
            t = t - gamma * sel

        if mode == "fixed":
            u = prox_psi(reg, u - gamma * g, gamma)
            continue

        # backtracking on the composite objective
        obj_cur = ev.objective(values, t, u)
        gamma_try = gamma
        accepted = False
        for _ in range(40):
            u_trial = prox_psi(reg, u - gamma_try * g, gamma_try)
            values_trial, warm_trial = ev.values_only(u_trial, warm, work)
            t_trial = ev.best_t(values_trial) if is_avar and cfg.t_update == "exact" else t
            obj_trial = ev.objective(values_trial, t_trial, u_trial)
            du = u_trial - u
            need = (ARMIJO_SIGMA / gamma_try) * float(du @ (ev.mass_full * du))
            if obj_trial <= obj_cur - need + 1e-15 * (1.0 + abs(obj_cur)):
                u, t, warm = u_trial, t_trial, warm_trial
                gamma = gamma_try
                accepted = True
                break
            gamma_try *= 0.5
        if not accepted:
            break  # no descent at the step floor; return the best point

    if res_cold > cfg.eps_stat:
        # cap or stall: certify the best point with one cold evaluation
        u, t = best_u, best_t
        values_c, grads_c, _ = ev.full_eval(u, None, work)
        if is_avar and cfg.t_update == "exact":
            t = ev.best_t(values_c)
        sub_c = ev.combine(values_c, grads_c, t)
        g_c = sub_c.g_u.values if isinstance(sub_c, SubgradientElement) else sub_c.values
        tt = (
            interval_distance_to_zero(sub_c.t_interval)
            if isinstance(sub_c, SubgradientElement)
            else 0.0
        )
        step_c = prox_psi(reg, u - cfg.gamma_probe * g_c, cfg.gamma_probe)
        dc = u - step_c
        res_cold = float(np.sqrt(dc @ (ev.mass_full * dc))) / cfg.gamma_probe + tt
        values = values_c

    objective = ev.objective(values, t, u)
    return StationaryPoint(
        u=GridFunction(grid, u, dirichlet=False),
        t=t if is_avar else None,
        residual=res_cold,
        objective=objective,
        iterations=iterations,
        converged=res_cold <= cfg.eps_stat,
        provenance=scen.provenance,
        gamma=float(gamma) if gamma is not None else 0.0,
        work_units=work.scenario_cg_iters,
    )


def multistart_cluster(points: list[StationaryPoint], tol_cluster: float) -> list[StationaryPoint]:
    """Greedy L2 clustering; one lowest-objective representative per cluster.

    Points are assigned to the first cluster whose anchor is within
    ``tol_cluster`` (control distance plus |t| gap), so the result is
    deterministic in the input order.
    """
    if tol_cluster <= 0:
        raise ValueError("tol_cluster must be positive")
    clusters: list[list[StationaryPoint]] = []
    for p in points:
        placed = False
        for members in clusters:
            if point_distance(p, members[0]) <= tol_cluster:
                members.append(p)
                placed = True
                break
        if not placed:
            clusters.append([p])
    return [min(members, key=lambda q: q.objective) for members in clusters]


def point_distance(p: StationaryPoint, q: StationaryPoint) -> float:
    """Product-space distance: lumped L2 in u plus the |t| gap when present."""
    mass = p.u.grid.lumped_mass_full
    d = p.u.values - q.u.values
    dist = float(np.sqrt(d @ (mass * d)))
    if p.t is not None and q.t is not None:
        dist += abs(p.t - q.t)
    return dist
