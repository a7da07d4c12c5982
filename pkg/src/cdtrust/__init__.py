"""Bi-temporal change detection with a logit-based trust indicator.

A small early-fusion FCN is trained on a handful of labeled scene pairs. For
each test scene the mean per-pixel maximum logit measures how confident the
network is; scenes it is least confident about are handed to a training-free
change-vector-analysis detector instead.
"""

from .confidence import SceneConfidence, decide_route, normalize_confidences, scene_confidence
from .estimators import (
    BandStandardizer,
    ConfidenceRouter,
    CvaOtsuDetector,
    FcnChangeDetector,
    RoutedChangeDetector,
)
from .fcn import FcnConfig, FcnModel, forward_logits, init_model, load_model, predict_map, save_model
from .metrics import ConfusionMatrix, confusion, falsecolor, kappa, sensitivity, specificity
from .pipeline import run_pipeline
from .raster import ChangeMask, Manifest, NormStats, Raster, ScenePair, load_manifest, read_raster, write_raster
from .training import TrainConfig, evaluate_split, train
from .unsupervised import cva_magnitude, otsu_threshold, unsupervised_change_map

__version__ = "0.1.0"

__all__ = [
    "BandStandardizer", "ChangeMask", "ConfidenceRouter", "ConfusionMatrix", "CvaOtsuDetector",
    "FcnChangeDetector", "FcnConfig", "FcnModel", "Manifest", "NormStats", "Raster",
    "RoutedChangeDetector", "SceneConfidence", "ScenePair", "TrainConfig", "confusion",
    "cva_magnitude", "decide_route", "evaluate_split", "falsecolor", "forward_logits", "init_model",
    "kappa", "load_manifest", "load_model", "normalize_confidences", "otsu_threshold", "predict_map",
    "read_raster", "run_pipeline", "save_model", "scene_confidence", "sensitivity", "specificity",
    "train", "unsupervised_change_map", "write_raster",
]
