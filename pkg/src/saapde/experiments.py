"""Consistency sweeps, reference stationary sets and the gradient battery.

The empirical study solves the sample-based problem for growing sample
sizes under common random numbers (scenario streams nest across sizes) and
measures the distance of each returned point to a reference stationary set,
itself estimated by clustered multi-start solves at a much larger sample
size and a much tighter residual.  Medians over replication seeds, their
bootstrap standard errors and the log-log slope summarize the trend.

All computations are deterministic given the configuration: scenario
streams are counter-based, solver paths are fixed, and the recorded cost
column is a work proxy (scenario-CG iterations at a nominal microsecond
each) rather than wall-clock time, so repeated runs emit byte-identical
tables.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig, build_bilinear, build_grid, build_semilinear
from .errors import ConfigError, SaaPdeError
from .grid import GridFunction, estimate_constants
from .optimizer import (
    SolverConfig,
    StationaryPoint,
    interval_distance_to_zero,
    multistart_cluster,
    point_distance,
    solve,
)
from .optimizer import make_evaluator
from .random_field import monte_carlo, quadrature
from .risk import avar_objective_from_values, prox_psi

PROBE_GAMMA = 1.0


@dataclass(frozen=True)
class SweepRecord:
    """One (sample size, seed) cell of a consistency sweep."""

    problem: str
    N: int
    seed: int
    objective: float
    residual: float
    t_value: float
    dist_to_ref: float
    ref_residual: float
    wall_ms: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class SweepResult:
    kind: str
    records: list[SweepRecord]
    reference: list[StationaryPoint]
    elapsed_s: float


def _build_problem(cfg: RunConfig, kind: str, grid=None, constants=None):
    if grid is None:
        grid = build_grid(cfg)
    if kind == "semilinear-avar":
        return grid, *build_semilinear(cfg, grid)
    if kind == "bilinear":
        if constants is None:
            constants = estimate_constants(grid)
        return grid, *build_bilinear(cfg, grid, constants)
    raise ConfigError(f"unknown problem kind {kind!r}")


def default_start(kind: str, grid, cfg: RunConfig) -> GridFunction:
    """Deterministic sweep start: zero control, or mid-range for bilinear."""
    if kind == "semilinear-avar":
        lo, hi = cfg.semilinear.box_lower, cfg.semilinear.box_upper
        values = np.full(grid.num_nodes, float(np.clip(0.0, lo, hi)))
    else:
        values = np.full(grid.num_nodes, min(0.5, cfg.bilinear.u_cap))
    return GridFunction(grid, values, dirichlet=False)


def _multistart_points(kind: str, grid, cfg: RunConfig, reg, count: int, seed: int):
    """Deterministic multi-start list: default start, a contrast, smooth noise."""
    starts = [default_start(kind, grid, cfg)]
    if count > 1:
        if kind == "semilinear-avar":
            contrast = 0.75 * cfg.semilinear.box_upper
        else:
            contrast = 0.5 * cfg.bilinear.u_cap
        starts.append(
            GridFunction(grid, reg.clip(np.full(grid.num_nodes, contrast)), dirichlet=False)
        )
    rng = np.random.default_rng(seed)
    x1, x2 = grid.nodes[:, 0], grid.nodes[:, 1]
    while len(starts) < count:
        coeff = rng.standard_normal((2, 2))
        v = sum(
            coeff[j, k] * np.sin((j + 1) * np.pi * x1) * np.sin((k + 1) * np.pi * x2)
            for j in range(2)
            for k in range(2)
        )
        starts.append(GridFunction(grid, reg.clip(v), dirichlet=False))
    return starts


def build_reference(cfg: RunConfig, kind: str, grid=None, constants=None,
                    problem=None, reg=None) -> list[StationaryPoint]:
    """Clustered multi-start stationary set of the large reference problem.

    Every start is solved to ``eps_ref``; non-converged starts are dropped
    (all dropped raises).  Deterministic given the configuration.
    """
    if problem is None:
        grid, problem, reg = _build_problem(cfg, kind, grid, constants)
    else:
        grid = problem.grid
    sw = cfg.sweep
    scen = monte_carlo(cfg.field, sw.resolved_ref_seed, sw.N_ref)
    solver = SolverConfig(
        gamma=cfg.solver.gamma,
        step_mode=cfg.solver.step_mode,
        max_iters=cfg.solver.max_iters,
        eps_stat=sw.eps_ref,
        t_update=cfg.solver.t_update,
        gamma_probe=cfg.solver.gamma_probe,
    )
    points = []
    for u0 in _multistart_points(kind, grid, cfg, reg, sw.multistart, sw.multistart_seed):
        p = solve(problem, scen, reg, solver, u0=u0)
        if p.converged:
            points.append(p)
    if not points:
        raise SaaPdeError("no reference start converged; cannot build a reference set")
    return multistart_cluster(points, sw.tol_cluster(kind))


def _residual_under(ev, u_values: np.ndarray, t: float | None, reg,
                    gamma_probe: float = PROBE_GAMMA) -> float:
    """Stationarity residual of a foreign point under this evaluator's objective."""
    values, grads, _ = ev.full_eval(u_values, None, None)
    sub = ev.combine(values, grads, t)
    from .risk import SubgradientElement

    if isinstance(sub, SubgradientElement):
        g = sub.g_u.values
        t_term = interval_distance_to_zero(sub.t_interval)
    else:
        g = sub.values
        t_term = 0.0
    step = prox_psi(reg, u_values - gamma_probe * g, gamma_probe)
    d = u_values - step
    return float(np.sqrt(d @ (ev.mass_full * d))) / gamma_probe + t_term


def _dist_to_reference(point: StationaryPoint, reference: list[StationaryPoint]) -> float:
    return min(point_distance(point, rep) for rep in reference)


def _sweep(cfg: RunConfig, kind: str, cells, scen_factory, eps_factory,
           reference, threads: int) -> SweepResult:
    t_start = time.perf_counter()
    grid, problem, reg = _build_problem(cfg, kind)
    if reference is None:
        reference = build_reference(cfg, kind, problem=problem, reg=reg)
    ref_scen = monte_carlo(cfg.field, cfg.sweep.resolved_ref_seed, cfg.sweep.N_ref)
    ref_ev = make_evaluator(problem, ref_scen, reg)
    u0 = default_start(kind, grid, cfg)

    def run_cell(cell):
        N_label, seed_label = cell
        scen = scen_factory(cell)
        solver = SolverConfig(
            gamma=cfg.solver.gamma,
            step_mode=cfg.solver.step_mode,
            max_iters=cfg.solver.max_iters,
            eps_stat=eps_factory(cell),
            t_update=cfg.solver.t_update,
            gamma_probe=cfg.solver.gamma_probe,
        )
        point = solve(problem, scen, reg, solver, u0=u0)
        dist = _dist_to_reference(point, reference)
        ref_res = _residual_under(ref_ev, point.u.values, point.t, reg)
        return SweepRecord(
            problem=kind,
            N=len(scen),
            seed=seed_label,
            objective=point.objective,
            residual=point.residual,
            t_value=point.t if point.t is not None else float("nan"),
            dist_to_ref=dist,
            ref_residual=ref_res,
            wall_ms=point.work_units * 1e-3,
            iterations=point.iterations,
            converged=point.converged,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run_cell, cells))
    else:
        records = [run_cell(c) for c in cells]
    records.sort(key=lambda r: (r.N, r.seed))
    return SweepResult(
        kind=kind,
        records=records,
        reference=reference,
        elapsed_s=time.perf_counter() - t_start,
    )


def run_mc_sweep(cfg: RunConfig, kind: str, reference=None,
                 threads: int | None = None) -> SweepResult:
    """Monte Carlo consistency sweep over (sample size, replication seed).

    Solver tolerance follows eps_N = epsilon0/sqrt(N); scenario streams per
    replication seed nest across N (common random numbers).
    """
    sw = cfg.sweep
    cells = [(N, s) for N in sw.sizes for s in range(sw.num_seeds)]

    def scen_factory(cell):
        N, s = cell
        return monte_carlo(cfg.field, sw.base_seed + s, N)

    def eps_factory(cell):
        return sw.eps_for(cell[0])

    return _sweep(cfg, kind, cells, scen_factory, eps_factory, reference,
                  threads or cfg.threads)


def run_quadrature_sweep(cfg: RunConfig, kind: str, reference=None,
                         threads: int | None = None) -> SweepResult:
    """Weak-measure sweep over tensor quadrature levels (deterministic).

    The seed column of the records carries the quadrature level.  Levels
    are solved to the fixed tolerance ``eps_quad``: the level sequence has
    no sampling noise for a matched tolerance schedule to track, and the
    tight stop keeps the level-to-level distances monotone down to the
    reference's own accuracy floor.
    """
    sw = cfg.sweep
    cells = [(level ** cfg.field.m_xi, level) for level in sw.quad_levels]

    def scen_factory(cell):
        return quadrature(cfg.field, cell[1])

    def eps_factory(cell):
        return sw.eps_quad

    return _sweep(cfg, kind, cells, scen_factory, eps_factory, reference,
                  threads or cfg.threads)


# -- trend statistics ---------------------------------------------------------


@dataclass(frozen=True)
class TrendStats:
    sizes: tuple[int, ...]
    medians: tuple[float, ...]
    q25: tuple[float, ...]
    q75: tuple[float, ...]
    se_medians: tuple[float, ...]
    slope_loglog: float


def trend_stats(records: list[SweepRecord], bootstrap: int = 200,
                seed: int = 2718) -> TrendStats:
    """Median distance per sample size with bootstrap standard errors."""
    sizes = sorted({r.N for r in records})
    rng = np.random.default_rng(seed)
    medians, q25s, q75s, ses = [], [], [], []
    for N in sizes:
        d = np.array([r.dist_to_ref for r in records if r.N == N])
        medians.append(float(np.median(d)))
        q25s.append(float(np.quantile(d, 0.25)))
        q75s.append(float(np.quantile(d, 0.75)))
        if d.size > 1 and bootstrap > 0:
            resamples = rng.integers(0, d.size, size=(bootstrap, d.size))
            ses.append(float(np.std(np.median(d[resamples], axis=1))))
        else:
            ses.append(0.0)
    logs = [(np.log(N), np.log(m)) for N, m in zip(sizes, medians) if m > 0]
    if len(logs) >= 2:
        x, y = np.array(logs).T
        slope = float(np.polyfit(x, y, 1)[0])
    else:
        slope = float("nan")
    return TrendStats(
        sizes=tuple(sizes),
        medians=tuple(medians),
        q25=tuple(q25s),
        q75=tuple(q75s),
        se_medians=tuple(ses),
        slope_loglog=slope,
    )


def trend_is_nonincreasing(stats: TrendStats) -> bool:
    """No adjacent median increase beyond one combined standard error."""
    for k in range(len(stats.sizes) - 1):
        allowance = float(np.hypot(stats.se_medians[k], stats.se_medians[k + 1]))
        if stats.medians[k + 1] > stats.medians[k] + allowance:
            return False
    return True


# -- gradient check battery ---------------------------------------------------


@dataclass(frozen=True)
class GradcheckReport:
    max_rel_semilinear: float
    max_rel_bilinear: float
    max_rel_avar: float
    threshold: float
    elapsed_s: float

    @property
    def passed(self) -> bool:
        return (
            max(self.max_rel_semilinear, self.max_rel_bilinear, self.max_rel_avar)
            <= self.threshold
        )


def _fd_relative_errors(batch_eval, grid, u_points, directions, weights,
                        step: float) -> float:
    """Max relative error of adjoint directional derivatives vs central FD."""
    mass = grid.lumped_mass_full
    worst = 0.0
    for u in u_points:
        values, grads = batch_eval(u)
        for h in directions.T:
            vp, _ = batch_eval(u + step * h)
            vm, _ = batch_eval(u - step * h)
            fd = (vp - vm) / (2.0 * step)
            an = grads @ (mass * h)
            denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-12)
            worst = max(worst, float(np.max(np.abs(fd - an) / denom)))
    return worst


def gradcheck(cfg: RunConfig, num_directions: int = 10, num_scenarios: int = 8,
              step: float = 1e-5, threshold: float = 1e-4,
              seed: int = 424242) -> GradcheckReport:
    """Finite-difference battery for both adjoint gradients and the AVaR slots.

    Checks ``num_directions`` random unit directions at three control points
    against ``num_scenarios`` fixed scenarios; fails above ``threshold``
    relative error.
    """
    t0 = time.perf_counter()
    grid = build_grid(cfg)
    scen = monte_carlo(cfg.field, seed, num_scenarios)
    rng = np.random.default_rng(seed + 1)
    mass = grid.lumped_mass_full
    directions = rng.standard_normal((grid.num_nodes, num_directions))
    directions /= np.sqrt(np.sum(directions * (mass[:, None] * directions), axis=0))

    sem, sem_reg = build_semilinear(cfg, grid)
    sem_batch = sem.batch(scen)
    lo, hi = cfg.semilinear.box_lower, cfg.semilinear.box_upper
    sem_points = [
        np.full(grid.num_nodes, np.clip(0.0, lo, hi)),
        np.full(grid.num_nodes, lo + 0.75 * (hi - lo)),
        np.clip(rng.uniform(lo, hi, grid.num_nodes), lo, hi),
    ]

    def sem_eval(u):
        values, grads, _ = sem_batch.values_and_grads(u)
        return values, grads

    max_sem = _fd_relative_errors(sem_eval, grid, sem_points, directions,
                                  scen.weights, step)

    consts = estimate_constants(grid)
    bil, bil_reg = build_bilinear(cfg, grid, consts)
    bil_batch = bil.batch(scen)
    cap = cfg.bilinear.u_cap
    bil_points = [
        np.full(grid.num_nodes, 0.25 * cap),
        np.full(grid.num_nodes, 0.75 * cap),
        np.clip(rng.uniform(0, cap, grid.num_nodes), 0, cap),
    ]

    def bil_eval(u):
        values, grads, _, _ = bil_batch.values_and_grads(u)
        return values, grads

    max_bil = _fd_relative_errors(bil_eval, grid, bil_points, directions,
                                  scen.weights, step)

    # off-kink subgradient of the risk-averse sample objective in (u, t)
    max_avar = 0.0
    u = sem_points[2]
    values, grads, _ = sem_batch.values_and_grads(u)
    w = scen.weights
    beta = cfg.semilinear.beta
    # place t in the widest interior gap of the sorted values, so every
    # scenario stays strictly on one side of its kink under the FD steps
    vs = np.sort(values)
    gaps = np.diff(vs)
    k = int(np.argmax(gaps))
    t_probe = float(0.5 * (vs[k] + vs[k + 1]))
    from .risk import avar_subgradient_from_values, default_kink_tol

    sub = avar_subgradient_from_values(
        values, grads, w, t_probe, beta, default_kink_tol(t_probe), grid
    )
    t_slot = sub.t_interval[0]  # point value off kinks
    for k in range(num_directions):
        h = directions[:, k]
        s = 1.0 if k % 2 == 0 else -1.0
        vp = sem_batch.values(sem_batch.solve_states(u + step * h))
        vm = sem_batch.values(sem_batch.solve_states(u - step * h))
        fd = (
            avar_objective_from_values(vp, w, t_probe + step * s, beta)
            - avar_objective_from_values(vm, w, t_probe - step * s, beta)
        ) / (2.0 * step)
        an = float(sub.g_u.values @ (mass * h)) + t_slot * s
        denom = max(abs(fd), abs(an), 1e-12)
        max_avar = max(max_avar, abs(fd - an) / denom)

    return GradcheckReport(
        max_rel_semilinear=max_sem,
        max_rel_bilinear=max_bil,
        max_rel_avar=max_avar,
        threshold=threshold,
        elapsed_s=time.perf_counter() - t0,
    )
