"""Hierarchical multi-view token pruning for manipulation policies.

The package covers the full offline pipeline: synthetic episode generation
(`synth`), geometry-driven two-level annotation (`annotate`), importance
predictor training (`predictor`), the hierarchical pruning pipeline with
its baselines (`pruner`), and a benchmark harness with a CLI (`bench`,
`cli`). Shared types and serialization live in `core`.
"""

from .core import (
    AnnotationError,
    ConfigError,
    ContractError,
    EpisodeAnnotation,
    FrameAnnotation,
    ImportanceScores,
    MultiViewObservation,
    ParseError,
    Phase,
    PruneConfig,
    PruneResult,
    Strategy,
    TokenGrid,
    TrainingError,
    ViewRoles,
    deserialize,
    pos_of,
    serialize,
)
from .predictor import (
    MlpParams,
    TrainConfig,
    forward,
    init_mlp,
    loss,
    loss_and_grad,
    total_loss,
    train,
)
from .pruner import (
    FlopModel,
    adaptive_weight,
    flop_estimate,
    hierarchical_prune,
    normalize_scores,
    prune_observation,
    random_drop,
    speedup_estimate,
)
from .annotate import (
    Box,
    BoxKind,
    FrameGeometry,
    PhaseSpan,
    PhaseTimeline,
    ViewGeometry,
    annotate_episode,
    boxes_to_patch_mask,
    debounce,
    detect_interaction,
    ingest_manual,
)
from .synth import ArmScript, ScenarioSpec, generate, generate_corpus
from .bench import MetricsReport, compare_strategies, run_experiment, sweep_beta

__all__ = [
    "AnnotationError", "ConfigError", "ContractError", "EpisodeAnnotation",
    "FrameAnnotation", "ImportanceScores", "MultiViewObservation",
    "ParseError", "Phase", "PruneConfig", "PruneResult", "Strategy",
    "TokenGrid", "TrainingError", "ViewRoles", "deserialize", "pos_of",
    "serialize",
    "MlpParams", "TrainConfig", "forward", "init_mlp", "loss",
    "loss_and_grad", "total_loss", "train",
    "FlopModel", "adaptive_weight", "flop_estimate", "hierarchical_prune",
    "normalize_scores", "prune_observation", "random_drop",
    "speedup_estimate",
    "Box", "BoxKind", "FrameGeometry", "PhaseSpan", "PhaseTimeline",
    "ViewGeometry", "annotate_episode", "boxes_to_patch_mask", "debounce",
    "detect_interaction", "ingest_manual",
    "ArmScript", "ScenarioSpec", "generate", "generate_corpus",
    "MetricsReport", "compare_strategies", "run_experiment", "sweep_beta",
]
