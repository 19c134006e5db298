"""Sample-based approximation of PDE-constrained stochastic control problems.

Library plus CLI for two model problems on the unit square: risk-averse
semilinear control with the average value-at-risk and risk-neutral bilinear
control.  Both are approximated by weighted scenario sets (Monte Carlo or
tensor quadrature), solved to approximate stationarity by a proximal
subgradient method, and studied empirically through consistency sweeps of
the stationary points as the sample size grows.
"""

__version__ = "0.1.0"

from .errors import (
    CoefficientBoundError,
    ConfigError,
    NonConvergenceError,
    OutOfNeighborhoodError,
    SaaPdeError,
)
from .grid import (
    CellField,
    Grid2D,
    GridConstants,
    GridFunction,
    SparseOperator,
    assemble_lumped_mass,
    assemble_stiffness,
    estimate_constants,
    norms,
    solve_spd,
)
from .random_field import (
    FieldSpec,
    ParamVector,
    ScenarioSet,
    monte_carlo,
    quadrature,
    sample_fields,
)
from .pde_semilinear import SemilinearProblem, default_target, grad_Jhat
from .pde_bilinear import BilinearProblem, grad_p, self_bound_check
from .risk import (
    AvarPoint,
    RegularizerSpec,
    SubgradientElement,
    avar_empirical,
    prox_psi,
    saa_avar_objective,
    saa_avar_subgradient,
    saa_bilinear_objective_gradient,
)
from .optimizer import (
    SolverConfig,
    StationaryPoint,
    multistart_cluster,
    solve,
    stationarity_residual,
)
from .config import RunConfig
from .experiments import (
    GradcheckReport,
    SweepRecord,
    build_reference,
    gradcheck,
    run_mc_sweep,
    run_quadrature_sweep,
)
