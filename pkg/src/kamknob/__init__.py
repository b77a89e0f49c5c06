"""Kolmogorov normal form with a frequency-detuning knob.

The public API re-exports the sparse Fourier-Taylor kernel, the homological
solver, the normalization driver, the quantitative estimates and the numerical
certificates.
"""

__version__ = "0.1.0"

from .series import (
    DimensionMismatch,
    DomainParams,
    Evaluator,
    FourierTaylor,
    LieSeries,
    SeriesError,
    SymmetryError,
    TruncationPolicy,
    angle_average,
    derivative_p,
    derivative_q,
    evaluate,
    grade_project,
    lie_derivative,
    lie_series_apply,
    lie_series_terms,
    linear_form,
    multiply,
    poisson_bracket,
    weighted_norm,
)
from .homological import (
    AverageNotRemovedError,
    DiophantineFrequency,
    DiophantineReport,
    ResonanceError,
    check_diophantine,
    chi_norm_factor,
    smallest_divisor,
    solve_homological,
)
from .normalizer import (
    CoordinateMap,
    GeneratorPair,
    HamiltonianState,
    NormalFormResult,
    OuterDiverged,
    OutOfDomain,
    RunParams,
    StepDiagnostics,
    TruncationOverflow,
    normalization_step,
    run_normalization,
    state_from_series,
    transform_point,
)
from .estimates import (
    ConstantsLedger,
    ScheduleInvalid,
    ScheduleParams,
    compare_predicted_observed,
    compute_constants,
    contraction_slope,
    detuning_condition,
    detuning_partial_sum,
    epsilon_threshold,
    predicted_schedule,
    shrink_product,
    size_constant,
)
from .verification import (
    DeformationReport,
    TorusReport,
    Trajectory,
    deformation_check,
    integrate_orbit,
    normal_form_residual,
    round_trip_error,
    symplecticity_defect,
    torus_residual,
)
