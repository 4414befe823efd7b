"""Active-set classifier, warm-start regressor and the baselines."""

from .model import (
    ARCHS,
    HEADS,
    ModelFormatError,
    PredictorModel,
    encode_inputs,
    forward,
    init_model,
    load_model,
    predict,
    save_model,
    zero_model,
)
from .nn import attention
from .train import (
    DigestMismatch,
    TrainConfig,
    TrainingDiverged,
    TrainReport,
    evaluate,
    label_metrics,
    threshold_labels,
    train,
)

__all__ = [
    "ARCHS", "HEADS", "ModelFormatError", "PredictorModel", "encode_inputs", "forward",
    "init_model", "load_model", "predict", "save_model", "zero_model", "attention",
    "DigestMismatch", "TrainConfig", "TrainingDiverged", "TrainReport", "evaluate",
    "label_metrics", "threshold_labels", "train",
]
