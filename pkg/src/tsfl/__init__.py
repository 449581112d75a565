"""Deterministic simulator for time-driven synchronous federated aggregation
over heterogeneous clients, with optimal-weight engines, discriminative model
selection, baseline strategies, and loss-bound diagnostics.
"""

from .core import (
    ClientProfile,
    IntervalRecord,
    ParameterVector,
    RunLog,
    SystemConstants,
    validate_constants,
)
from .training import (
    EstimatedConstants,
    GradientSample,
    LogisticTask,
    QuadraticTask,
    estimate_constants,
    local_train,
    stochastic_gradient,
)
from .aggregation import (
    BoundCoefficients,
    FixedPointError,
    WeightAssignment,
    aggregate,
    bound_coefficients,
    bound_optimal_weights,
    dms_threshold,
    dms_weights,
    fedasync_update,
    fedavg_weights,
    filtering_probability,
    iteration_spaced_weights,
    project_to_simplex,
    sample_participation,
    spacing_slope,
    uniform_weights,
)
from .analysis import (
    BoundReport,
    ConvergenceReport,
    estimate_dissimilarity,
    evaluate_bound,
    heterogeneity_degree,
    verify_convergence,
)
from .scenarios import (
    FixedIterations,
    GaussianFloorIterations,
    LatencyModel,
    Scenario,
    TaskSpec,
    apply_client_selection,
    preset,
    two_tier_speed_profile,
)
from .scheduler import (
    ALL_STRATEGIES,
    INTERVAL_STRATEGIES,
    participation_frequency,
    run_afl,
    run_semi_async,
    run_sfl,
    run_strategy,
    run_tsfl,
)

__version__ = "0.1.0"
