"""Cross pseudo-labeling for audio-visual source localization, desk scale.

Two co-trained encoder pairs exchange sharpened, EMA-smoothed soft
pseudo-labels over curriculum-selected samples; everything runs on synthetic
scenes with exact ground truth so each mechanism is verifiable.
"""

__version__ = "0.1.0"

from .model import BackboneSpec, EncoderParams, PredictionMap, prediction_map
from .pseudolabel import (
    PseudoLabel,
    PseudoLabelBank,
    SelectionSchedule,
    curriculum_select,
    ema_update,
    make_instant_pl,
    normalize_map,
    pearson,
    sharpen,
)
from .synthdata import AVPair, Dataset, GenConfig, augment, generate_dataset, split_openset
from .metrics import EvalReport, binarize, evaluate, iou
from .trainer import MetricsHistory, TrainConfig, TrainResult, run_experiment

__all__ = [
    "AVPair",
    "BackboneSpec",
    "Dataset",
    "EncoderParams",
    "EvalReport",
    "GenConfig",
    "MetricsHistory",
    "PredictionMap",
    "PseudoLabel",
    "PseudoLabelBank",
    "SelectionSchedule",
    "TrainConfig",
    "TrainResult",
    "augment",
    "binarize",
    "curriculum_select",
    "ema_update",
    "evaluate",
    "generate_dataset",
    "iou",
    "make_instant_pl",
    "normalize_map",
    "pearson",
    "prediction_map",
    "run_experiment",
    "sharpen",
    "split_openset",
]
