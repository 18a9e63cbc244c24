"""Synthetic scene generation, success-region evaluation, and the ablation
matrix."""

from .synthetic import (  # noqa: F401
    GenerationError,
    SyntheticSceneSpec,
    default_scene_spec,
    generate_synthetic_scene,
    load_ground_truth,
)
from .evaluation import (  # noqa: F401
    AblationConfig,
    EvalReport,
    RolloutOutcome,
    SuccessRegion,
    evaluate_task,
    export_heatmap,
    paired_rollout,
    run_ablations,
)
