"""Affine random coefficient fields and scenario sets.

The parameter vector xi lives in [-1,1]^{m_xi} with the uniform product
measure.  Diffusion, reaction weight and load are affine in xi with cosine
modes

    phi_j(x1, x2) = cos(j pi x1) cos(j pi x2),

so the coefficient bounds (kappa_min, g bounds, b_max) follow from triangle
inequalities and are certified by construction.

Two scenario backends: i.i.d. Monte Carlo draws from a counter-based
generator (scenario i depends only on (seed, i), which makes
``monte_carlo(seed, N)`` an exact prefix of ``monte_carlo(seed, 2N)``), and
tensor Gauss-Legendre rules normalized to the uniform measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .grid import CellField, Grid2D, GridFunction


def _mode_weights(m_xi: int, total: float) -> tuple[float, ...]:
    """1/j^2 amplitude profile scaled so the absolute sum is exactly ``total``."""
    w = 1.0 / np.arange(1, m_xi + 1, dtype=float) ** 2
    a = total * w / w.sum()
    if m_xi > 1:
        a[-1] = total - float(a[:-1].sum())
    else:
        a[0] = total
    return tuple(float(v) for v in a)


def default_load(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Nominal load, a positive bump vanishing on the boundary."""
    return 8.0 * x1 * x2 * (1.0 - x1) * (1.0 - x2)


@dataclass(frozen=True)
class ParamVector:
    """One realization xi in [-1,1]^{m_xi}."""

    components: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.components, dtype=float)
        if c.ndim != 1:
            raise ValueError("parameter vector must be one-dimensional")
        if not np.all(np.isfinite(c)) or np.any(np.abs(c) > 1.0):
            raise ValueError("parameter components must lie in [-1, 1]")
        object.__setattr__(self, "components", c)

    @property
    def m_xi(self) -> int:
        return self.components.shape[0]


@dataclass(frozen=True)
class FieldSpec:
    """Amplitudes and base values of the three affine coefficient fields.

    Invariants enforced at construction: kappa_min > 0, the reaction weight
    g is nonnegative for every xi, and the load amplitudes are finite so
    the L2 bound b_max follows by triangle inequality.
    """

    m_xi: int = 4
    kappa0: float = 1.0
    kappa_amps: tuple[float, ...] = None
    g0: float = 1.0
    g_amps: tuple[float, ...] = None
    b_amps: tuple[float, ...] = None

    def __post_init__(self):
        if self.m_xi < 1:
            raise ConfigError("m_xi must be at least 1")
        if self.kappa_amps is None:
            object.__setattr__(self, "kappa_amps", _mode_weights(self.m_xi, 0.5 * self.kappa0))
        if self.g_amps is None:
            object.__setattr__(self, "g_amps", _mode_weights(self.m_xi, 0.5 * self.g0))
        if self.b_amps is None:
            object.__setattr__(self, "b_amps", _mode_weights(self.m_xi, 0.1))
        for name in ("kappa_amps", "g_amps", "b_amps"):
            amps = getattr(self, name)
            if len(amps) != self.m_xi:
                raise ConfigError(f"{name} must have length m_xi={self.m_xi}")
        if self.kappa_min <= 0.0:
            raise ConfigError(
                f"kappa_min = {self.kappa_min} must be positive; "
                "reduce the diffusion amplitudes"
            )
        if self.g_min < 0.0:
            raise ConfigError(
                f"reaction weight can reach {self.g_min} < 0; "
                "reduce the g amplitudes"
            )

    @property
    def kappa_min(self) -> float:
        return self.kappa0 - sum(abs(a) for a in self.kappa_amps)

    @property
    def kappa_max(self) -> float:
        return self.kappa0 + sum(abs(a) for a in self.kappa_amps)

    @property
    def g_min(self) -> float:
        return self.g0 - sum(abs(a) for a in self.g_amps)

    @property
    def g_max(self) -> float:
        return self.g0 + sum(abs(a) for a in self.g_amps)

    def modes_at(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Evaluate the m_xi cosine modes; shape (len(x), m_xi)."""
        j = np.arange(1, self.m_xi + 1)
        return np.cos(np.pi * np.outer(x1, j)) * np.cos(np.pi * np.outer(x2, j))

    def b_max(self, grid: Grid2D) -> float:
        """Certified bound on the lumped L2 norm of b(xi) on this grid."""
        from .grid import norms

        b0 = GridFunction.from_callable(grid, default_load, dirichlet=False)
        total = norms(b0)[0]
        modes = self.modes_at(grid.nodes[:, 0], grid.nodes[:, 1])
        for j, amp in enumerate(self.b_amps):
            phi = GridFunction(grid, modes[:, j], dirichlet=False)
            total += abs(amp) * norms(phi)[0]
        return total

    def to_dict(self) -> dict:
        return {
            "m_xi": self.m_xi,
            "kappa0": self.kappa0,
            "kappa_amps": list(self.kappa_amps),
            "g0": self.g0,
            "g_amps": list(self.g_amps),
            "b_amps": list(self.b_amps),
        }

    @staticmethod
    def from_dict(d: dict) -> "FieldSpec":
        known = {"m_xi", "kappa0", "kappa_amps", "g0", "g_amps", "b_amps"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown field keys: {sorted(unknown)}")
        kwargs = dict(d)
        for key in ("kappa_amps", "g_amps", "b_amps"):
            if key in kwargs and kwargs[key] is not None:
                kwargs[key] = tuple(float(v) for v in kwargs[key])
        return FieldSpec(**kwargs)


@dataclass(frozen=True)
class ScenarioSet:
    """Weighted parameter vectors with a provenance tag."""

    points: np.ndarray           # (N, m_xi)
    weights: np.ndarray          # (N,), positive, sum 1
    provenance: str

    def __post_init__(self):
        if self.points.ndim != 2 or self.weights.shape != (self.points.shape[0],):
            raise ValueError("inconsistent scenario array shapes")
        if np.any(self.weights <= 0.0):
            raise ValueError("scenario weights must be positive")
        if abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("scenario weights must sum to one")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __getitem__(self, i: int) -> tuple[ParamVector, float]:
        return ParamVector(self.points[i]), float(self.weights[i])


def sample_fields(
    spec: FieldSpec, xi: ParamVector | np.ndarray, grid: Grid2D
) -> tuple[CellField, CellField, GridFunction]:
    """Realize (kappa, g, b) for one xi: cellwise kappa and g, nodal b."""
    x = xi.components if isinstance(xi, ParamVector) else np.asarray(xi, dtype=float)
    kappas, gs, bs = sample_fields_batch(spec, x[None, :], grid)
    kappa = CellField(grid, kappas[0], min_allowed=None)
    g = CellField(grid, gs[0], min_allowed=None)
    b = GridFunction(grid, bs[0], dirichlet=False)
    return kappa, g, b


def sample_fields_batch(
    spec: FieldSpec, xis: np.ndarray, grid: Grid2D
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized field realization; rows of ``xis`` are parameter vectors.

    Returns (kappa_cells (B, ncells), g_cells (B, ncells), b_nodes (B, nodes)),
    bitwise identical to stacking single-xi calls.
    """
    xis = np.asarray(xis, dtype=float)
    cm = grid.cell_centroids
    cell_modes = spec.modes_at(cm[:, 0], cm[:, 1])          # (ncells, m_xi)
    node_modes = spec.modes_at(grid.nodes[:, 0], grid.nodes[:, 1])

    kappa = spec.kappa0 + (xis * np.asarray(spec.kappa_amps)) @ cell_modes.T
    g = spec.g0 + (xis * np.asarray(spec.g_amps)) @ cell_modes.T
    b0 = default_load(grid.nodes[:, 0], grid.nodes[:, 1])
    b = b0 + (xis * np.asarray(spec.b_amps)) @ node_modes.T
    return kappa, g, b


def _philox_uniform(seed: int, index: int, m_xi: int) -> np.ndarray:
    """Uniform [-1,1) draws for scenario ``index`` of stream ``seed``."""
    bitgen = np.random.Philox(key=seed, counter=index << 64)
    u = np.random.Generator(bitgen).random(m_xi)
    return 2.0 * u - 1.0


def monte_carlo(spec: FieldSpec, seed: int, N: int) -> ScenarioSet:
    """N i.i.d. uniform scenarios with equal weights 1/N.

    Counter-based: scenario i is a pure function of (seed, i), so streams
    with the same seed nest exactly across sample sizes (common random
    numbers for the consistency sweeps).
    """
    if N < 1:
        raise ConfigError("sample size must be at least 1")
    points = np.empty((N, spec.m_xi))
    for i in range(N):
        points[i] = _philox_uniform(seed, i, spec.m_xi)
    weights = np.full(N, 1.0 / N)
    return ScenarioSet(points, weights, provenance=f"monte_carlo(seed={seed}, N={N})")


def quadrature(spec: FieldSpec, level: int) -> ScenarioSet:
    """Tensor Gauss-Legendre rule for the uniform measure on [-1,1]^{m_xi}."""
    if level < 1:
        raise ConfigError("quadrature level must be at least 1")
    count = level ** spec.m_xi
    if count > 10 ** 6:
        raise ConfigError(
            f"tensor rule would need {count} points (cap 10^6); reduce the level"
        )
    q, w = np.polynomial.legendre.leggauss(level)
    w = w / 2.0  # uniform density on [-1, 1]

    grids = np.meshgrid(*([q] * spec.m_xi), indexing="ij")
    points = np.column_stack([g.ravel() for g in grids])
    wgrids = np.meshgrid(*([w] * spec.m_xi), indexing="ij")
    weights = np.ones(count)
    for g in wgrids:
        weights = weights * g.ravel()
    weights = weights / weights.sum()
    return ScenarioSet(points, weights, provenance=f"quadrature(level={level})")
