"""Compositional visual-clue learning for multi-label intent recognition.

Pipeline pieces: frequency-aware prototype allocation, per-class k-means
initialization, a differentiable online clustering layer with momentum
prototype updates, label-prior query decoders, the asymmetric training
loss, a full multi-label metric suite, and a config-driven train/eval
harness.
"""

from .allocation import AllocationPlan, allocate_prototypes
from .clustering import (
    AssignmentResult,
    ReconstructedFeature,
    forward_stage,
    momentum_update,
    reconstruct_feature_map,
    soft_assignment,
)
from .config import RunConfig, load_config, parse_config_text
from .data import (
    Dataset,
    DatasetManifest,
    MultiLabelSample,
    PatchFeatureMap,
    SyntheticSpec,
    class_counts,
    clue_oracle_predict,
    generate_synthetic,
    load_dataset,
    read_dataset,
    save_dataset,
)
from .errors import ConfigError, DataError, McclError, NumericalError
from .harness import (
    Checkpoint,
    EmaShadow,
    evaluate_checkpoint,
    evaluate_model,
    load_checkpoint,
    one_cycle_lr,
    save_checkpoint,
    train,
)
from .kmeans import mini_batch_kmeans
from .losses import asymmetric_loss
from .metrics import (
    MetricsReport,
    accuracy_and_auc,
    evaluate_predictions,
    f1_suite,
    mean_average_precision,
)
from .model import IntentClassifier
from .prototypes import PrototypeBank, build_prototype_bank, load_bank, save_bank

__all__ = [
    "AllocationPlan",
    "AssignmentResult",
    "Checkpoint",
    "ConfigError",
    "DataError",
    "Dataset",
    "DatasetManifest",
    "EmaShadow",
    "IntentClassifier",
    "McclError",
    "MetricsReport",
    "MultiLabelSample",
    "NumericalError",
    "PatchFeatureMap",
    "PrototypeBank",
    "ReconstructedFeature",
    "RunConfig",
    "SyntheticSpec",
    "accuracy_and_auc",
    "allocate_prototypes",
    "asymmetric_loss",
    "build_prototype_bank",
    "class_counts",
    "clue_oracle_predict",
    "evaluate_checkpoint",
    "evaluate_model",
    "evaluate_predictions",
    "f1_suite",
    "forward_stage",
    "generate_synthetic",
    "load_bank",
    "load_checkpoint",
    "load_config",
    "load_dataset",
    "mean_average_precision",
    "mini_batch_kmeans",
    "momentum_update",
    "one_cycle_lr",
    "parse_config_text",
    "read_dataset",
    "reconstruct_feature_map",
    "save_bank",
    "save_checkpoint",
    "save_dataset",
    "soft_assignment",
    "train",
]
