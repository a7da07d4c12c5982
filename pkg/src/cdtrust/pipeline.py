"""Decide per test scene between the trained FCN and the CVA fallback.

Flow: if the training set is declared large and diverse, every scene uses the
supervised model. Otherwise the confidence of the model is measured on every
test scene, normalized across the set, and scenes below ``tau`` are mapped by
the unsupervised detector instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

from .confidence import (
    DEFAULT_TAU,
    SUPERVISED,
    UNSUPERVISED,
    SceneConfidence,
    decide_route,
    normalize_confidences,
    scene_confidence,
)
from .exceptions import ValidationError
from .fcn import FcnModel, forward_logits, predict_from_logits
from .raster import ChangeMask, Raster, ScenePair
from .unsupervised import cva_magnitude, is_degenerate, otsu_threshold, threshold_map


@dataclass(frozen=True)
class SceneOutcome:
    scene_id: str
    route: str
    mask: ChangeMask
    supervised: ChangeMask
    unsupervised: Optional[ChangeMask]
    logits: Raster
    confidence: SceneConfidence
    tau: float
    otsu_degenerate: bool = False


def scene_confidences(model: FcnModel, scenes: Sequence[ScenePair]) -> tuple:
    """Logit maps and normalized confidences for ``scenes``, in order."""
    if not scenes:
        raise ValidationError("no test scenes to assess")
    logits = [forward_logits(model, s.pre, s.post) for s in scenes]
    raw = [scene_confidence(lm, s.mask, s.scene_id) for lm, s in zip(logits, scenes)]
    return logits, normalize_confidences(raw)


def run_pipeline(model: FcnModel, scenes: Sequence[ScenePair], tau: float = DEFAULT_TAU,
                 assume_diverse: bool = False, always_unsupervised: bool = False) -> list:
    """Route each scene and return its outcome.

    With ``assume_diverse`` every scene is routed supervised (confidence is
    still reported). ``always_unsupervised`` computes the fallback map for
    every scene even when unused, for side-by-side evaluation.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    logits, confs = scene_confidences(model, scenes)
    out = []
    for s, lm, sc in zip(scenes, logits, confs):
        route = SUPERVISED if assume_diverse else decide_route(sc, tau).route
        sup = predict_from_logits(lm)
        unsup, degenerate = None, False
        if route == UNSUPERVISED or always_unsupervised:
            mag = cva_magnitude(s.pre, s.post, model.norm_stats)
            degenerate = is_degenerate(mag)
            unsup = threshold_map(mag, otsu_threshold(mag))
        mask = sup if route == SUPERVISED else unsup
        out.append(SceneOutcome(s.scene_id, route, mask, sup, unsup, lm, sc, tau, degenerate))
    return out
