"""Risk functionals, SAA composite objectives and the box-quadratic regularizer.

The average value-at-risk of a weighted sample is computed by the sorted
quantile formula: minimizers of

    t + (1/(1-beta)) * sum_i w_i (Z_i - t)_+

form the interval between the lower and upper beta-quantiles, and the value
is the weighted tail mean.  Subgradients of the SAA objective carry one
interval per scenario for the plus-function kink; the fixed selection
theta_i = 1{Z_i - t > 0} is used for iterations, the full interval for the
t-slot diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import GridFunction
from .random_field import ScenarioSet


def _weighted_l2(values: np.ndarray, mass: np.ndarray) -> float:
    return float(np.sqrt(values @ (mass * values)))


@dataclass(frozen=True)
class AvarPoint:
    """Control plus the auxiliary value-at-risk level t."""

    u: GridFunction
    t: float

    def __post_init__(self):
        if not np.isfinite(self.t):
            raise ValueError("t must be finite")


@dataclass(frozen=True)
class RegularizerSpec:
    """psi = indicator of a nodewise box plus (alpha/2)*||u||_L2^2."""

    alpha: float
    lower: float | np.ndarray
    upper: float | np.ndarray
    kind: str = "box+quadratic"

    def __post_init__(self):
        if self.alpha <= 0.0:
            raise ValueError("alpha must be positive")
        if np.any(np.asarray(self.lower) > np.asarray(self.upper)):
            raise ValueError("box bounds must satisfy lower <= upper nodewise")
        if self.kind != "box+quadratic":
            raise ValueError(f"unsupported regularizer kind: {self.kind}")

    def clip(self, values: np.ndarray) -> np.ndarray:
        return np.clip(values, self.lower, self.upper)

    def value(self, u_values: np.ndarray, mass: np.ndarray) -> float:
        """psi(u); infinite outside the box (up to a 1e-12 feasibility slack)."""
        if np.any(u_values < np.asarray(self.lower) - 1e-12) or np.any(
            u_values > np.asarray(self.upper) + 1e-12
        ):
            return np.inf
        return 0.5 * self.alpha * float(u_values @ (mass * u_values))


@dataclass(frozen=True)
class SubgradientElement:
    """(u, t)-component of an SAA Clarke subgradient.

    ``t_interval`` collapses to a point when no scenario sits on the
    plus-function kink; ``active_fractions`` records the fixed selection
    per scenario, ``active_intervals`` the full kink intervals.
    """

    g_u: GridFunction
    t_interval: tuple[float, float]
    active_fractions: np.ndarray
    active_intervals: np.ndarray   # (N, 2)

    def __post_init__(self):
        lo, hi = self.t_interval
        if not lo <= hi:
            raise ValueError("t-interval must satisfy lo <= hi")

    @property
    def kink_count(self) -> int:
        iv = self.active_intervals
        return int(np.sum(iv[:, 1] > iv[:, 0]))


def avar_empirical(values, weights, beta: float) -> tuple[float, tuple[float, float]]:
    """Average value-at-risk of a weighted sample and its minimizing t-set.

    Sort-based: with cumulative weights c_k over sorted values, the lower
    quantile is the first value with c_k >= beta; the minimizer set widens
    to the next value exactly when c_k == beta.
    """
    if not (0.0 < beta < 1.0):
        raise ValueError("beta must lie strictly between 0 and 1")
    v = np.asarray(values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if v.shape != w.shape or v.ndim != 1 or v.size == 0:
        raise ValueError("values and weights must be matching nonempty vectors")
    if np.any(w <= 0.0) or abs(float(w.sum()) - 1.0) > 1e-9:
        raise ValueError("weights must be positive and sum to one")

    order = np.argsort(v, kind="stable")
    vs = v[order]
    ws = w[order]
    c = np.cumsum(ws)
    k = int(np.searchsorted(c, beta, side="left"))
    k = min(k, vs.size - 1)
    t_lo = float(vs[k])
    t_hi = float(vs[k + 1]) if (k + 1 < vs.size and c[k] == beta) else t_lo
    tail = np.maximum(vs - t_lo, 0.0)
    avar = t_lo + float(ws @ tail) / (1.0 - beta)
    return avar, (t_lo, t_hi)


def avar_objective_from_values(
    values: np.ndarray, weights: np.ndarray, t: float, beta: float
) -> float:
    """sum_i w_i G(Z_i, t) with G(s, t) = t + (s - t)_+ / (1 - beta)."""
    plus = np.maximum(np.asarray(values) - t, 0.0)
    return t + float(np.asarray(weights) @ plus) / (1.0 - beta)


def theta_intervals(
    values: np.ndarray, t: float, kink_tol: float
) -> tuple[np.ndarray, np.ndarray]:
    """Plus-function subdifferential intervals and the fixed selection.

    Interval [0,0] below the kink, [1,1] above, [0,1] within ``kink_tol``;
    the selection is 1 exactly when the argument is strictly positive.
    """
    s = np.asarray(values) - t
    lo = np.where(s > kink_tol, 1.0, 0.0)
    hi = np.where(s < -kink_tol, 0.0, 1.0)
    selected = np.where(s > 0.0, 1.0, 0.0)
    return np.column_stack([lo, hi]), selected


def avar_subgradient_from_values(
    values: np.ndarray,
    grads: np.ndarray,
    weights: np.ndarray,
    t: float,
    beta: float,
    kink_tol: float,
    grid,
) -> SubgradientElement:
    """Assemble the (u, t) subgradient element from per-scenario data.

    ``grads`` holds the scenario gradients of the inner objective in its
    rows (N, nodes).
    """
    w = np.asarray(weights, dtype=float)
    intervals, selected = theta_intervals(values, t, kink_tol)
    coeff = w * selected / (1.0 - beta)
    g_u = (grads * coeff[:, None]).sum(axis=0)
    t_lo = 1.0 - float(w @ intervals[:, 1]) / (1.0 - beta)
    t_hi = 1.0 - float(w @ intervals[:, 0]) / (1.0 - beta)
    return SubgradientElement(
        g_u=GridFunction(grid, g_u, dirichlet=False),
        t_interval=(t_lo, t_hi),
        active_fractions=selected,
        active_intervals=intervals,
    )


def default_kink_tol(t: float) -> float:
    return 1e-10 * (1.0 + abs(t))


def interval_distance_to_zero(interval: tuple[float, float]) -> float:
    lo, hi = interval
    if lo <= 0.0 <= hi:
        return 0.0
    return min(abs(lo), abs(hi))


# -- SAA composite objectives ------------------------------------------------


def saa_avar_objective(prob, scen: ScenarioSet, point: AvarPoint, reg: RegularizerSpec) -> float:
    """SAA risk-averse objective sum_i w_i G(Jhat_i, t) + (alpha/2)||u||^2."""
    batch = prob.batch(scen)
    y = batch.solve_states(point.u.values)
    values = batch.values(y)
    mass = prob.grid.lumped_mass_full
    reg_val = 0.5 * reg.alpha * float(point.u.values @ (mass * point.u.values))
    return avar_objective_from_values(values, scen.weights, point.t, prob.beta) + reg_val


def saa_avar_subgradient(
    prob,
    scen: ScenarioSet,
    point: AvarPoint,
    reg: RegularizerSpec,
    kink_tol: float | None = None,
) -> SubgradientElement:
    """Fixed-selection SAA subgradient of the smooth-plus-plus part.

    The regularizer's alpha-term and box are handled by the proximal map,
    so they do not enter ``g_u``.
    """
    if kink_tol is None:
        kink_tol = default_kink_tol(point.t)
    batch = prob.batch(scen)
    values, grads, _y = batch.values_and_grads(point.u.values)
    return avar_subgradient_from_values(
        values, grads, scen.weights, point.t, prob.beta, kink_tol, prob.grid
    )


def saa_bilinear_objective_gradient(
    prob, scen: ScenarioSet, u: GridFunction, reg: RegularizerSpec
) -> tuple[float, GridFunction]:
    """Risk-neutral SAA value (with the alpha-term) and its smooth gradient."""
    batch = prob.batch(scen)
    values, grads, _y, _mh1 = batch.values_and_grads(u.values)
    w = scen.weights
    value = float(w @ values)
    mass = prob.grid.lumped_mass_full
    value += 0.5 * reg.alpha * float(u.values @ (mass * u.values))
    g = (grads * w[:, None]).sum(axis=0)
    return value, GridFunction(prob.grid, g, dirichlet=False)


def prox_psi(reg: RegularizerSpec, v: GridFunction | np.ndarray, gamma: float):
    """Exact proximal map of psi: nodewise clamp of v/(1 + gamma*alpha).

    Both the quadratic and the box are separable per node, and the lumped
    mass weights cancel, so the scalar formula applies nodewise.
    """
    if gamma <= 0.0:
        raise ValueError("gamma must be positive")
    if isinstance(v, GridFunction):
        out = reg.clip(v.values / (1.0 + gamma * reg.alpha))
        return GridFunction(v.grid, out, dirichlet=v.dirichlet)
    return reg.clip(np.asarray(v) / (1.0 + gamma * reg.alpha))
