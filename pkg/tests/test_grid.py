"""Grid, assembly, solver and constant-estimation tests.

Expected values come from independent oracles: hand assembly of the
constant-coefficient stencil, a pure-python consistent-mass assembly for
the lumping check, dense direct solves, and dense generalized eigensolves.
"""

import numpy as np
import pytest
import scipy.linalg

from saapde.errors import CoefficientBoundError, NonConvergenceError
from saapde.grid import (
    CellField,
    Grid2D,
    GridFunction,
    SparseOperator,
    assemble_lumped_mass,
    assemble_stiffness,
    estimate_constants,
    norms,
    solve_spd,
)


def unit_cellfield(grid, value=1.0):
    return CellField(grid, np.full(grid.num_cells, value))


def consistent_mass_rowsums(grid):
    """Oracle: row sums of the consistent P1 mass matrix, all nodes."""
    rowsum = np.zeros(grid.num_nodes)
    area = grid.h * grid.h / 2.0
    for tri in grid.cells:
        for a in range(3):
            # row a of the local consistent mass (area/12)*[[2,1,1],...]
            rowsum[tri[a]] += area / 12.0 * (2.0 + 1.0 + 1.0)
    return rowsum


def test_stencil_n2_matches_hand_assembly():
    grid = Grid2D(2)
    A = assemble_stiffness(grid, unit_cellfield(grid))
    assert A.to_dense() == pytest.approx(np.array([[4.0]]))


def test_stencil_is_h_independent_five_point():
    grid = Grid2D(8)
    A = assemble_stiffness(grid, unit_cellfield(grid)).to_dense()
    m = grid.num_interior
    side = grid.n - 1
    center = grid.interior_index[grid.interior_ids[side * (side // 2) + side // 2]]
    assert A[center, center] == pytest.approx(4.0)
    row = A[center]
    neighbors = np.sort(row[row != 0.0])
    assert neighbors == pytest.approx([-1.0, -1.0, -1.0, -1.0, 4.0])


def test_stiffness_symmetry_is_exact():
    grid = Grid2D(12)
    rng = np.random.default_rng(3)
    kappa = CellField(grid, 0.5 + rng.uniform(0, 1, grid.num_cells))
    A = assemble_stiffness(grid, kappa).to_dense()
    assert np.array_equal(A, A.T)


def test_stiffness_linear_in_kappa():
    grid = Grid2D(6)
    A1 = assemble_stiffness(grid, unit_cellfield(grid)).to_dense()
    Ac = assemble_stiffness(grid, unit_cellfield(grid, 2.5)).to_dense()
    assert Ac == pytest.approx(2.5 * A1)


def test_stiffness_rejects_nonpositive_coefficient():
    grid = Grid2D(4)
    values = np.ones(grid.num_cells)
    values[3] = 0.0
    with pytest.raises(CoefficientBoundError):
        assemble_stiffness(grid, CellField(grid, values))


def test_stiffness_cellwise_lower_bound():
    grid = Grid2D(10)
    rng = np.random.default_rng(11)
    kappa_min = 0.5
    kappa = CellField(grid, kappa_min + rng.uniform(0, 1, grid.num_cells))
    A = assemble_stiffness(grid, kappa)
    A1 = grid.unit_stiffness_interior
    for _ in range(20):
        v = rng.standard_normal(grid.num_interior)
        assert v @ A.matvec(v) >= kappa_min * (v @ A1.matvec(v)) - 1e-12


def test_lumped_mass_interior_diagonal_h2():
    grid = Grid2D(2)
    M = assemble_lumped_mass(grid)
    assert M.to_dense() == pytest.approx(np.array([[0.25]]))
    grid = Grid2D(9)
    M = assemble_lumped_mass(grid)
    assert M.diagonal_values() == pytest.approx(np.full(grid.num_interior, grid.h ** 2))


def test_lumped_mass_matches_consistent_rowsums():
    grid = Grid2D(7)
    lumped = assemble_lumped_mass(grid, dirichlet=False).diagonal_values()
    assert lumped == pytest.approx(consistent_mass_rowsums(grid))


def test_lumped_mass_total_is_domain_area():
    for n in (2, 5, 16):
        grid = Grid2D(n)
        total = assemble_lumped_mass(grid, dirichlet=False).diagonal_values().sum()
        assert total == pytest.approx(1.0, abs=1e-12)


def test_mass_matvec_recovers_diagonal():
    grid = Grid2D(5)
    M = assemble_lumped_mass(grid)
    ones = np.ones(grid.num_interior)
    assert M.matvec(ones) == pytest.approx(M.diagonal_values())


def test_full_stiffness_kernel_contains_constants():
    grid = Grid2D(6)
    A = grid.unit_seminorm_full
    ones = np.ones(grid.num_nodes)
    assert np.abs(A.matvec(ones)).max() < 1e-13


def test_solve_spd_zero_rhs():
    grid = Grid2D(8)
    A = assemble_stiffness(grid, unit_cellfield(grid))
    assert np.array_equal(solve_spd(A, np.zeros(grid.num_interior)), np.zeros(grid.num_interior))


def test_solve_spd_poisson_center_value():
    # -Laplace y = 1 on the unit square; continuum center value 0.073671
    grid = Grid2D(16)
    A = assemble_stiffness(grid, unit_cellfield(grid))
    rhs = grid.lumped_mass_interior.copy()
    x = solve_spd(A, rhs)
    dense = np.linalg.solve(A.to_dense(), rhs)
    assert x == pytest.approx(dense, abs=1e-10)
    coords = grid.nodes[grid.interior_ids]
    center = int(np.argmin(((coords - 0.5) ** 2).sum(axis=1)))
    assert abs(x[center] - 0.0735) < 2e-3


def test_solve_spd_round_trip():
    grid = Grid2D(12)
    rng = np.random.default_rng(5)
    kappa = CellField(grid, 0.5 + rng.uniform(0, 1, grid.num_cells))
    A = assemble_stiffness(grid, kappa)
    x_true = rng.standard_normal(grid.num_interior)
    rhs = A.matvec(x_true)
    x = solve_spd(A, rhs, tol=1e-12)
    assert np.linalg.norm(A.matvec(x) - rhs) <= 1e-12 * np.linalg.norm(rhs)


def test_solve_spd_iteration_cap_error():
    grid = Grid2D(8)
    A = assemble_stiffness(grid, unit_cellfield(grid))
    rhs = np.ones(grid.num_interior)
    with pytest.raises(NonConvergenceError) as err:
        solve_spd(A, rhs, tol=1e-12, maxiter=2)
    assert err.value.residual is not None and err.value.residual > 0


def test_norms_zero_and_homogeneity():
    grid = Grid2D(9)
    zero = GridFunction.zeros(grid)
    assert norms(zero) == (0.0, 0.0)
    rng = np.random.default_rng(2)
    f = GridFunction(grid, rng.standard_normal(grid.num_interior))
    l2, h01 = norms(f)
    l2x2, h01x2 = norms(GridFunction(grid, 2.0 * f.values))
    assert l2x2 == pytest.approx(2.0 * l2)
    assert h01x2 == pytest.approx(2.0 * h01)


def test_norms_first_eigenvector_rayleigh():
    # the lowest Dirichlet mode has h01^2/l2^2 -> 2 pi^2 as n grows
    grid = Grid2D(32)
    f = GridFunction.from_callable(
        grid, lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    )
    l2, h01 = norms(f)
    assert h01 ** 2 / l2 ** 2 == pytest.approx(2 * np.pi ** 2, rel=5e-3)


def test_estimate_constants_against_dense_eigensolve():
    grid = Grid2D(16)
    consts = estimate_constants(grid)
    A = grid.unit_stiffness_interior.to_dense()
    M = np.diag(grid.lumped_mass_interior)
    lam = scipy.linalg.eigh(A, M, eigvals_only=True)[0]
    assert consts.lambda_min == pytest.approx(lam, rel=1e-7)
    assert consts.C_D == pytest.approx(1.0 / np.sqrt(lam), rel=1e-7)


def test_estimate_constants_c_d_values_and_monotonicity():
    c8 = estimate_constants(Grid2D(8)).C_D
    c16 = estimate_constants(Grid2D(16)).C_D
    c32 = estimate_constants(Grid2D(32)).C_D
    assert abs(c32 - 0.2251) < 2e-3
    limit = 1.0 / np.sqrt(2 * np.pi ** 2)
    assert c8 > c16 > c32 > limit


def test_estimate_constants_l4_stability():
    c16 = estimate_constants(Grid2D(16)).C_H01_L4
    c32 = estimate_constants(Grid2D(32)).C_H01_L4
    assert c16 > 0 and c32 > 0
    assert abs(c16 - c32) / c32 < 0.05


def test_discrete_friedrichs_inequality():
    grid = Grid2D(16)
    c_d = estimate_constants(grid).C_D
    rng = np.random.default_rng(7)
    for _ in range(100):
        f = GridFunction(grid, rng.standard_normal(grid.num_interior))
        l2, h01 = norms(f)
        assert l2 <= c_d * h01 * (1 + 1e-7)


def test_gridfunction_validation():
    grid = Grid2D(4)
    with pytest.raises(ValueError):
        GridFunction(grid, np.zeros(5))
    bad = np.zeros(grid.num_interior)
    bad[0] = np.nan
    with pytest.raises(ValueError):
        GridFunction(grid, bad)


def test_cell_average_preserves_bounds_and_constants():
    grid = Grid2D(8)
    rng = np.random.default_rng(9)
    cells = rng.uniform(0.5, 1.5, grid.num_cells)
    nodal = grid.cell_average_to_nodes(cells)
    assert nodal.min() >= 0.5 - 1e-12 and nodal.max() <= 1.5 + 1e-12
    const = grid.cell_average_to_nodes(np.full(grid.num_cells, 0.7))
    assert const == pytest.approx(np.full(grid.num_nodes, 0.7))


def test_batched_assembly_matches_single():
    from saapde._batch import BatchedSpd

    grid = Grid2D(8)
    rng = np.random.default_rng(13)
    kappas = 0.5 + rng.uniform(0, 1, (4, grid.num_cells))
    batch = BatchedSpd.stiffness(grid, kappas)
    for b in range(4):
        single = assemble_stiffness(grid, CellField(grid, kappas[b]))
        assert np.array_equal(batch.data[b], single.csr.data)
        x = rng.standard_normal(grid.num_interior)
        assert batch.matvec(np.tile(x, (4, 1)))[b] == pytest.approx(single.matvec(x))


def test_banded_factor_matches_dense_solve():
    from saapde._batch import BatchedSpd

    grid = Grid2D(8)
    rng = np.random.default_rng(17)
    kappas = 0.5 + rng.uniform(0, 1, (3, grid.num_cells))
    batch = BatchedSpd.stiffness(grid, kappas)
    extra = rng.uniform(0, 0.1, (3, grid.num_interior))
    rhs = rng.standard_normal((3, grid.num_interior))
    x = batch.factor(extra).solve(rhs)
    import scipy.sparse as sp

    for b in range(3):
        dense = sp.csr_matrix(
            (batch.data[b], batch.indices, batch.indptr)
        ).toarray() + np.diag(extra[b])
        expected = np.linalg.solve(dense, rhs[b])
        assert x[b] == pytest.approx(expected, rel=1e-12, abs=1e-14)
