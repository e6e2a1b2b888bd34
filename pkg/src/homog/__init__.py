"""Numerical periodic homogenization for second-order elliptic systems.

Computes unit-cell correctors, assembles the homogenized operator, and runs
the resolvent / spectrum convergence experiments on periodic tori.
"""

from .cell import (
    CellCorrectors,
    CellGrid,
    CellSolver,
    CorrectorCache,
    corrector_cache,
    solve_correctors,
    solve_periodic_system,
)
from .coeffs import (
    BStructure,
    CoefficientSet,
    ComplexExpr,
    MatrixField,
    SamplingPlan,
    ValidationReport,
    gradient_structure,
    load_problem_toml,
    problem_from_dict,
    validate,
)
from .discrete import (
    DiscreteField,
    DiscreteOperator,
    EpsilonChoice,
    TorusGrid,
    apply_corrector,
    assemble_G_0,
    assemble_G_eps,
    assemble_H_0,
    assemble_H_eps,
    identity_operator,
    l2h_norm,
    lowest_eigenvalues,
    solve_shifted,
    w1h_norm,
)
from .effective import (
    HomogenizedCoefficients,
    SlowGrid,
    assemble_A1_A0,
    assemble_A2,
    assemble_G0,
    assemble_homogenized,
)
from .errors import (
    CacheMiss,
    CommensurabilityError,
    CrossCheckFailed,
    DegenerateFit,
    DimensionError,
    HomogError,
    NodeMismatch,
    ParseError,
    PeriodicityError,
    RateAnomalousWarning,
    ShiftInsideSpectrum,
    SolvabilityViolated,
    SolverDiverged,
    ValidationFailed,
)
from .experiments import (
    ConvergenceReport,
    GridPlan,
    SpectralWindow,
    SpectrumReport,
    fit_rate,
    run_resolvent_convergence,
    run_spectrum_convergence,
)
from .expr import Tabulated, eval_field, parse_expr, serialize
from .scenarios import (
    PRESET_NAMES,
    DivergenceFormSpec,
    TransformField,
    assemble_divergence_form,
    f_transform_check,
    get_preset,
    pauli_2d,
    to_canonical,
)

__version__ = "0.1.0"
