"""Model-free data-driven solver for inelastic truss structures.

States live in a per-element (strain, stress) phase space equipped with a
weighted energetic metric. Each time step is solved by alternating between
the affine subspace of compatible-and-equilibrated states and a material
data set sampled around the previous state, until the data assignment
repeats. History dependence enters through the data set itself: the sets
are regenerated each step conditioned on the accepted local states (and
internal variables, for rate-independent behaviour), or assembled from
two-time archives of recorded transitions.
"""

from .data import (
    ConditioningState,
    DataPoint,
    GeneratorSpec,
    HistoryRepository,
    LocalDataSet,
    StackedSets,
    WindowRule,
    batch_nearest,
    gaussian_fidelity_cost,
    generate_plastic_set,
    generate_sls_set,
    history_cost_dataset,
    nearest_history,
    project_onto_D,
    read_datasets_csv,
    stack_sets,
    update_history_variable,
    write_datasets_csv,
)
from .experiments import (
    DEFAULT_PLASTIC,
    DEFAULT_SLS,
    PLASTIC_BREAKPOINTS,
    VISCO_BREAKPOINTS,
    ConvergenceRow,
    OracleCheckResult,
    RelaxationConfig,
    RelaxationResult,
    StudyConfig,
    StudyResult,
    build_relaxation_repository,
    build_truss_repositories,
    bv_error,
    default_study_config,
    fit_loglog_slope,
    oracle_check,
    random_small_instance,
    reference_trajectory,
    relaxation_mesh,
    run_convergence_study,
    run_relaxation,
    run_relaxation_history,
    small_truss_fixture,
    study_generator,
    study_loads,
    study_mesh,
    study_metric,
    study_times,
    trajectory_norm,
    weighted_l2_error,
    write_rate_csv,
    write_relaxation_csv,
    write_study_csv,
)
from .materials import (
    PlasticParams,
    ReturnMapResult,
    SlsParams,
    plastic_return_map,
    sls_affine_coefficients,
    sls_relaxation_exact,
    sls_stress_update,
)
from .phase import (
    GlobalMetric,
    GlobalState,
    LocalMetric,
    LocalPhasePoint,
    global_distance_sq,
    global_norm_sq,
    local_distance_sq,
    local_norm_sq,
)
from .solver import (
    SolverConfig,
    StepResult,
    Trajectory,
    enumerate_global_min,
    export_trajectory_csv,
    fixed_point_solve,
    history_matching_march,
    time_march,
    trajectory_summary,
    write_summary_csv,
)
from .truss import (
    ConstraintSystem,
    LatticeSpec,
    LoadProgram,
    MechanismError,
    PiecewiseLinearProgram,
    Prescribed,
    ProjectionResult,
    TrussMesh,
    assemble,
    evaluate_load,
    generate_lattice_truss,
    load_mesh,
    project_onto_E,
    save_mesh,
)

__version__ = "0.1.0"

__all__ = [
    # phase space
    "LocalPhasePoint",
    "LocalMetric",
    "GlobalMetric",
    "GlobalState",
    "local_norm_sq",
    "local_distance_sq",
    "global_norm_sq",
    "global_distance_sq",
    # material laws
    "SlsParams",
    "PlasticParams",
    "ReturnMapResult",
    "sls_affine_coefficients",
    "sls_stress_update",
    "sls_relaxation_exact",
    "plastic_return_map",
    # truss mechanics
    "TrussMesh",
    "LatticeSpec",
    "generate_lattice_truss",
    "PiecewiseLinearProgram",
    "Prescribed",
    "LoadProgram",
    "evaluate_load",
    "ConstraintSystem",
    "assemble",
    "MechanismError",
    "ProjectionResult",
    "project_onto_E",
    "load_mesh",
    "save_mesh",
    # data sets
    "DataPoint",
    "LocalDataSet",
    "StackedSets",
    "stack_sets",
    "batch_nearest",
    "project_onto_D",
    "ConditioningState",
    "WindowRule",
    "GeneratorSpec",
    "generate_sls_set",
    "generate_plastic_set",
    "update_history_variable",
    "gaussian_fidelity_cost",
    "HistoryRepository",
    "nearest_history",
    "history_cost_dataset",
    "write_datasets_csv",
    "read_datasets_csv",
    # solver
    "SolverConfig",
    "StepResult",
    "fixed_point_solve",
    "enumerate_global_min",
    "Trajectory",
    "time_march",
    "history_matching_march",
    "export_trajectory_csv",
    "trajectory_summary",
    "write_summary_csv",
    # experiments
    "DEFAULT_SLS",
    "DEFAULT_PLASTIC",
    "VISCO_BREAKPOINTS",
    "PLASTIC_BREAKPOINTS",
    "weighted_l2_error",
    "bv_error",
    "trajectory_norm",
    "fit_loglog_slope",
    "reference_trajectory",
    "relaxation_mesh",
    "RelaxationConfig",
    "RelaxationResult",
    "run_relaxation",
    "build_relaxation_repository",
    "run_relaxation_history",
    "StudyConfig",
    "ConvergenceRow",
    "StudyResult",
    "study_mesh",
    "study_loads",
    "study_times",
    "study_metric",
    "study_generator",
    "run_convergence_study",
    "default_study_config",
    "small_truss_fixture",
    "build_truss_repositories",
    "OracleCheckResult",
    "oracle_check",
    "random_small_instance",
    "write_relaxation_csv",
    "write_study_csv",
    "write_rate_csv",
    "__version__",
]
