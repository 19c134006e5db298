"""Random field realization and scenario set tests."""

import numpy as np
import pytest

from saapde.errors import ConfigError
from saapde.grid import Grid2D, GridFunction, norms
from saapde.random_field import (
    FieldSpec,
    ParamVector,
    ScenarioSet,
    monte_carlo,
    quadrature,
    sample_fields,
)


def test_default_spec_certified_bounds():
    spec = FieldSpec()
    assert spec.kappa_min == pytest.approx(0.5, abs=1e-15)
    assert spec.kappa_max == pytest.approx(1.5, abs=1e-15)
    assert spec.g_min == pytest.approx(0.5, abs=1e-15)
    assert spec.g_max == pytest.approx(1.5, abs=1e-15)


def test_spec_rejects_bad_amplitudes():
    with pytest.raises(ConfigError):
        FieldSpec(kappa_amps=(0.6, 0.3, 0.2, 0.1))   # kappa_min < 0
    with pytest.raises(ConfigError):
        FieldSpec(g_amps=(1.2, 0.0, 0.0, 0.0))       # g can go negative
    with pytest.raises(ConfigError):
        FieldSpec(b_amps=(0.1, 0.1))                 # wrong length


def test_spec_serialization_round_trip():
    spec = FieldSpec(m_xi=3, kappa0=2.0)
    again = FieldSpec.from_dict(spec.to_dict())
    assert again == spec
    with pytest.raises(ConfigError):
        FieldSpec.from_dict({"m_xi": 2, "bogus": 1})


def test_sample_fields_nominal_point():
    grid = Grid2D(8)
    spec = FieldSpec()
    kappa, g, b = sample_fields(spec, np.zeros(4), grid)
    assert kappa.values == pytest.approx(np.full(grid.num_cells, spec.kappa0))
    assert g.values == pytest.approx(np.full(grid.num_cells, spec.g0))
    x, y = grid.nodes[:, 0], grid.nodes[:, 1]
    assert b.values == pytest.approx(8.0 * x * y * (1 - x) * (1 - y))


def test_sample_fields_respects_bounds():
    grid = Grid2D(8)
    spec = FieldSpec()
    rng = np.random.default_rng(1)
    worst_kappa = np.inf
    for _ in range(1000):
        xi = rng.uniform(-1, 1, spec.m_xi)
        kappa, g, _ = sample_fields(spec, xi, grid)
        worst_kappa = min(worst_kappa, kappa.values.min())
        assert kappa.values.min() >= spec.kappa_min - 1e-12
        assert kappa.values.max() <= spec.kappa_max + 1e-12
        assert g.values.min() >= spec.g_min - 1e-12
    assert worst_kappa >= spec.kappa_min


def test_b_max_is_certified_for_random_draws():
    from saapde.random_field import sample_fields_batch

    grid = Grid2D(8)
    spec = FieldSpec()
    bound = spec.b_max(grid)
    rng = np.random.default_rng(2)
    xis = rng.uniform(-1, 1, (10_000, spec.m_xi))
    _, _, b = sample_fields_batch(spec, xis, grid)
    mass = grid.lumped_mass_full
    l2 = np.sqrt(np.sum(b * b * mass, axis=1))
    assert l2.max() <= bound + 1e-12


def test_sample_fields_deterministic():
    grid = Grid2D(6)
    spec = FieldSpec()
    xi = np.array([0.3, -0.7, 0.1, 0.9])
    k1, g1, b1 = sample_fields(spec, xi, grid)
    k2, g2, b2 = sample_fields(spec, xi, grid)
    assert np.array_equal(k1.values, k2.values)
    assert np.array_equal(g1.values, g2.values)
    assert np.array_equal(b1.values, b2.values)


def test_monte_carlo_basic_contract():
    spec = FieldSpec()
    scen = monte_carlo(spec, seed=3, N=1)
    assert len(scen) == 1
    assert scen.weights == pytest.approx([1.0])
    xi, w = scen[0]
    assert np.all(np.abs(xi.components) <= 1.0)


def test_monte_carlo_prefix_property():
    spec = FieldSpec()
    small = monte_carlo(spec, seed=7, N=64)
    big = monte_carlo(spec, seed=7, N=128)
    assert np.array_equal(small.points, big.points[:64])


def test_monte_carlo_seeds_differ():
    spec = FieldSpec()
    a = monte_carlo(spec, seed=1, N=32)
    b = monte_carlo(spec, seed=2, N=32)
    assert not np.array_equal(a.points, b.points)


def test_monte_carlo_component_means():
    spec = FieldSpec()
    scen = monte_carlo(spec, seed=11, N=100_000)
    means = scen.points.mean(axis=0)
    assert np.all(np.abs(means) <= 0.02)


def test_quadrature_level_one_is_nominal():
    spec = FieldSpec()
    scen = quadrature(spec, 1)
    assert len(scen) == 1
    assert scen.points[0] == pytest.approx(np.zeros(spec.m_xi), abs=1e-15)
    assert scen.weights[0] == pytest.approx(1.0)


def test_quadrature_polynomial_exactness():
    spec = FieldSpec()
    for level in (2, 3):
        scen = quadrature(spec, level)
        est = scen.weights @ scen.points[:, 0] ** 2
        assert est == pytest.approx(1.0 / 3.0, abs=1e-13)
    assert np.all(quadrature(spec, 4).weights > 0)


def test_quadrature_size_cap():
    spec = FieldSpec(m_xi=6)
    with pytest.raises(ConfigError):
        quadrature(spec, 11)   # 11^6 > 1e6


def test_quadrature_weak_convergence_battery():
    # degree-4 monomial battery: errors non-increasing across levels 1..5
    spec = FieldSpec()
    exact = {
        (4, 0, 0, 0): 1.0 / 5.0,
        (2, 2, 0, 0): 1.0 / 9.0,
        (2, 0, 0, 0): 1.0 / 3.0,
        (1, 1, 1, 1): 0.0,
        (3, 1, 0, 0): 0.0,
    }
    for powers, target in exact.items():
        errors = []
        for level in range(1, 6):
            scen = quadrature(spec, level)
            value = float(
                scen.weights
                @ np.prod(scen.points ** np.asarray(powers), axis=1)
            )
            errors.append(abs(value - target))
        for a, b in zip(errors, errors[1:]):
            assert b <= a + 1e-14


def test_scenario_weights_validation():
    pts = np.zeros((2, 4))
    with pytest.raises(ValueError):
        ScenarioSet(pts, np.array([0.5, 0.6]), "x")
    with pytest.raises(ValueError):
        ScenarioSet(pts, np.array([1.0, -0.1]), "x")


def test_param_vector_validation():
    with pytest.raises(ValueError):
        ParamVector(np.array([0.5, 1.5]))
    v = ParamVector(np.array([0.5, -1.0]))
    assert v.m_xi == 2
