"""Zero-/few-shot visual anomaly classification and segmentation toolkit."""

from .encoder import (
    EncoderConfig,
    EncoderOutput,
    ExternalBackbone,
    TokenInjection,
    ToyBackbone,
    apply_dpam,
)
from .scoring import ScoreMap
from .winclip import (
    PromptEnsemble,
    ReferenceMemory,
    WindowGrid,
    WindowSpec,
    aggregate_to_map,
    build_prompt_ensemble,
    generate_windows,
    run_winclip,
    score_windows,
    score_with_references,
)
from .anomalyclip import (
    LearnablePromptState,
    LossConfig,
    PromptConfig,
    TrainBatch,
    TrainConfig,
    dice_loss,
    focal_loss,
    init_prompts,
    score_image,
    text_embeddings,
    total_loss,
    train,
)
from .metrics import (
    CategoryMetrics,
    EvalReport,
    ScoreRecord,
    aupro,
    auroc,
    average_precision,
    build_report,
    evaluate_category,
    merge_reports,
)
from .dataset import (
    DatasetIndex,
    DefectSpec,
    DefectTaxonomy,
    FixtureSpec,
    breakdown_by_taxonomy,
    load_index,
    load_taxonomy,
    make_fixture,
)
from .runner import RunConfig, emit_comparison, run_eval, sweep_shots, sweep_window_sizes

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "EncoderOutput",
    "ExternalBackbone",
    "TokenInjection",
    "ToyBackbone",
    "apply_dpam",
    "ScoreMap",
    "PromptEnsemble",
    "ReferenceMemory",
    "WindowGrid",
    "WindowSpec",
    "aggregate_to_map",
    "build_prompt_ensemble",
    "generate_windows",
    "run_winclip",
    "score_windows",
    "score_with_references",
    "LearnablePromptState",
    "LossConfig",
    "PromptConfig",
    "TrainBatch",
    "TrainConfig",
    "dice_loss",
    "focal_loss",
    "init_prompts",
    "score_image",
    "text_embeddings",
    "total_loss",
    "train",
    "CategoryMetrics",
    "EvalReport",
    "ScoreRecord",
    "aupro",
    "auroc",
    "average_precision",
    "build_report",
    "evaluate_category",
    "merge_reports",
    "DatasetIndex",
    "DefectSpec",
    "DefectTaxonomy",
    "FixtureSpec",
    "breakdown_by_taxonomy",
    "load_index",
    "load_taxonomy",
    "make_fixture",
    "RunConfig",
    "emit_comparison",
    "run_eval",
    "sweep_shots",
    "sweep_window_sizes",
]
