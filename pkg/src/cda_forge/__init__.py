"""cda-forge: curriculum-style data augmentation for metaphor detection.

The engine iterates: evaluate the student on the current data, fine-tune on
what it already predicts correctly, ask a teacher model to generate new
variants of what it gets wrong, merge, repeat.
"""

from .client import Completion, EndpointConfig, HttpChatClient, MockModel, MockRule, mock_model
from .data import (
    AugMethod,
    Augmented,
    ColumnMap,
    Dataset,
    DatasetStats,
    Instance,
    Label,
    Original,
    QaRecord,
    compute_stats,
    ingest_dataset,
    merge_dedup,
    render_qa,
    sample_balanced,
)
from .augmenter import (
    AugmentationLog,
    GenerationOutcome,
    RejectReason,
    augment_round,
    parse_generation,
    render_aug_prompt,
)
from .evaluator import (
    ConfusionMatrix,
    EvalReport,
    ParsedAnswer,
    PredictionRecord,
    Split,
    compute_metrics,
    evaluate_split,
    parse_answer,
)
from .pipeline import (
    IterationRecord,
    RunConfig,
    RunState,
    report_run,
    resume_run,
    run_cda,
    teacher_filter,
)
from .trainer import (
    CheckpointRef,
    MockTrainer,
    TrainerConfig,
    base_checkpoint,
    export_training_file,
    mock_trainer,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AugMethod", "Augmented", "AugmentationLog", "CheckpointRef", "ColumnMap",
    "Completion", "ConfusionMatrix", "Dataset", "DatasetStats", "EndpointConfig",
    "EvalReport", "GenerationOutcome", "HttpChatClient", "Instance",
    "IterationRecord", "Label", "MockModel", "MockRule", "MockTrainer",
    "Original", "ParsedAnswer", "PredictionRecord", "QaRecord", "RejectReason",
    "RunConfig", "RunState", "Split", "TrainerConfig", "augment_round",
    "base_checkpoint", "compute_metrics", "compute_stats", "evaluate_split",
    "export_training_file", "ingest_dataset", "merge_dedup", "mock_model",
    "mock_trainer", "parse_answer", "parse_generation", "render_aug_prompt",
    "render_qa", "report_run", "resume_run", "run_cda", "sample_balanced",
    "teacher_filter", "train",
]
