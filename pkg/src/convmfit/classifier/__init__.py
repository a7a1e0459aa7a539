from .baselines import VARIANTS, BaselineResources, MissingResourceError, build_baseline
from .model import (
    ABLATION_ROWS,
    FULL_CONVMFIT,
    AblationConfig,
    ClassifierBatch,
    ConvMFiTClassifier,
    UnfreezeSchedule,
    build_classifier,
    encode_triples,
)
from .training import FinetuneConfig, evaluate, finetune_classifier, predict, threshold_labels

__all__ = [
    "VARIANTS", "BaselineResources", "MissingResourceError", "build_baseline",
    "ABLATION_ROWS", "FULL_CONVMFIT", "AblationConfig", "ClassifierBatch", "ConvMFiTClassifier",
    "UnfreezeSchedule", "build_classifier", "encode_triples",
    "FinetuneConfig", "evaluate", "finetune_classifier", "predict", "threshold_labels",
]
