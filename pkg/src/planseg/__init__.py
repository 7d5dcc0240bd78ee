"""planseg: a plans-file-driven 3D segmentation workbench.

All behavior changes flow through JSON plans files; code stays fixed. The
package covers plan resolution, network topology planning and construction,
synthetic dataset generation, patient-stratified cross-validation training,
sliding-window ensemble inference, and dual-convention evaluation.
"""

from .plans import (
    PlanFile,
    PlansError,
    PlansParseError,
    PlansSchemaError,
    PlanValidationError,
    InheritanceCycleError,
    UnknownConfigurationError,
    RawConfiguration,
    ResolvedConfiguration,
    diff_configurations,
    load_plans,
    parse_plans,
    resolve_configuration,
    save_plans,
    serialize_plans,
    validate_configuration,
)
from .topology import (
    FootprintEstimate,
    InfeasibleBudgetError,
    PlanningError,
    TopologyDescriptor,
    compute_receptive_field,
    count_parameters,
    descriptor_from_config,
    estimate_footprint,
    max_batch_size,
    plan_topology,
)
from .networks import (
    ConstructionError,
    SegmentationNetwork,
    ShapeError,
    build_network,
    linearize,
)
from .checkpoint import (
    Checkpoint,
    CheckpointError,
    load_checkpoint,
    restore_momentum,
    restore_network,
    save_checkpoint,
)
from .data import (
    AssignmentError,
    FoldAssignment,
    MVOLFormatError,
    NormalizationStats,
    ParameterError,
    StatsError,
    Volume,
    assign_folds,
    compute_normalization_stats,
    compute_stats_with_fallback,
    compute_whole_volume_stats,
    generate_synthetic_dataset,
    load_dataset,
    load_volume,
    normalize,
    sample_patch,
    save_dataset,
    save_volume,
)
from .training import (
    CVResult,
    DivergenceSignal,
    TrainingState,
    deep_supervision_weights,
    poly_learning_rate,
    run_cross_validation,
    train_fold,
    training_loss,
)
from .inference import (
    InferenceError,
    TilingPlan,
    compute_tiling,
    ensemble,
    gaussian_importance_map,
    predict_volume,
    save_prediction,
    segment,
)
from .metrics import (
    CaseMetrics,
    EvalReport,
    aggregate,
    dice,
    evaluate_case,
    fp_fn_volumes,
    save_report,
)

__version__ = "0.1.0"
