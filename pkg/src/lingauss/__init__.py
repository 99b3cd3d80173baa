"""Parameter estimation for time-varying linear Gaussian state-space models.

The package fits model and noise-covariance parameters by maximizing the
Kalman-filter-based likelihood (ML) or by minimizing the prediction-error
sum of squares (A-ML), using a constrained generalized Gauss-Newton SQP.
It ships seeded simulation, a Monte-Carlo experiment harness, a
trajectory-optimization baseline for comparison, and a CLI.
"""

from .model import (
    AffineFamily,
    ConstraintSet,
    ModelSpec,
    ValidationReport,
    augment_with_disturbance,
    eval_constraints,
    evaluate_matrices,
    matrix_derivative,
    validate_parameters,
)
from .kalman import (
    FilterError,
    FilterState,
    FilterTrace,
    StepRecord,
    kalman_step,
    run_filter,
    run_filter_with_sensitivities,
    stacked_log_likelihood,
)
from .objectives import (
    ObjectiveEval,
    ObjectiveKind,
    TOEval,
    TrajectoryFitError,
    eval_objective,
    eval_to_inner,
    to_counterexample_bound,
)
from .solver import (
    EstimationResult,
    QPError,
    QPSolution,
    QPSubproblem,
    SolverConfig,
    SolverError,
    build_qp,
    estimate,
    line_search_update,
    quad_approx_ml_term,
    solve_dense_qp,
)
from .simulate import (
    InputProfile,
    MeasurementSeries,
    SimulationError,
    gen_piecewise_inputs,
    sample_trajectory,
    sample_true_params,
)
from .examples import (
    build_example,
    build_heat_transfer,
    build_random_walk,
    build_underdetermined,
)
from .bench import (
    ExperimentReport,
    expected_objective_argmin,
    fit_convergence_rate,
    landscape_scan,
    run_mse_experiment,
)
from .specio import load_model_spec, save_model_spec

__version__ = "0.1.0"
