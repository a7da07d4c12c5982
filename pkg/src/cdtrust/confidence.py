"""Logit-based scene confidence and supervised/unsupervised routing.

For each pixel the largest raw logit (before any softmax) is taken; a scene's
indicator ``beta`` is the mean of those maxima. Across a set of test scenes the
betas are min-max normalized to ``beta_norm`` in [0, 1], and scenes whose
normalized confidence falls below a threshold ``tau`` are handed to the
unsupervised detector.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .exceptions import ShapeError, ValidationError
from .raster import ChangeMask, Raster

SUPERVISED = "supervised"
UNSUPERVISED = "unsupervised"
DEFAULT_TAU = 0.5


@dataclass(frozen=True)
class SceneConfidence:
    scene_id: str
    beta: float
    beta_norm: Optional[float] = None
    degenerate: bool = False

    def __post_init__(self):
        if not math.isfinite(self.beta):
            raise ValidationError(f"scene {self.scene_id!r}: beta must be finite")
        if self.beta_norm is not None and not 0.0 <= self.beta_norm <= 1.0:
            raise ValidationError(f"scene {self.scene_id!r}: beta_norm {self.beta_norm} outside [0, 1]")


@dataclass(frozen=True)
class RoutingDecision:
    scene_id: str
    route: str
    beta_norm: float
    tau: float


def pixel_zopt(logits) -> float:
    z = np.asarray(logits, dtype=np.float64).ravel()
    if z.size < 2:
        raise ValidationError("need at least two logits per pixel")
    if not np.all(np.isfinite(z)):
        raise ValidationError("logits must be finite")
    return float(z.max())


def zopt_map(logits) -> np.ndarray:
    """Per-pixel maximum logit of a ``(K+1, h, w)`` logit map."""
    z = logits.data if isinstance(logits, Raster) else np.asarray(logits)
    if z.ndim != 3 or z.shape[0] < 2:
        raise ShapeError(f"logit map must be (K+1 >= 2, h, w), got {z.shape}")
    return z.max(axis=0)


def scene_confidence(lm, valid=None, scene_id: str = "") -> SceneConfidence:
    """Mean per-pixel max logit over all pixels, or over ``valid`` ones.

    ``valid`` may be a boolean array or a :class:`ChangeMask` (ignore-labeled
    pixels are then excluded).
    """
    zopt = zopt_map(lm)
    if valid is not None:
        v = valid.valid if isinstance(valid, ChangeMask) else np.asarray(valid, dtype=bool)
        if v.shape != zopt.shape:
            raise ShapeError(f"validity mask {v.shape} does not match logits {zopt.shape}")
        zopt = zopt[v]
    if zopt.size == 0:
        raise ValidationError(f"scene {scene_id!r}: no valid pixels for the confidence indicator")
    if not np.all(np.isfinite(zopt)):
        raise ValidationError(f"scene {scene_id!r}: non-finite logits")
    return SceneConfidence(scene_id, float(zopt.mean(dtype=np.float64)))


def minmax(betas: Sequence[float]) -> tuple:
    """Min-max normalize; a zero range maps everything to 1.0 and reports degeneracy."""
    b = np.asarray(betas, dtype=np.float64)
    if b.size == 0:
        raise ValidationError("cannot normalize an empty set of confidences")
    if not np.all(np.isfinite(b)):
        raise ValidationError("betas must be finite")
    lo, hi = b.min(), b.max()
    if hi == lo:
        return np.ones_like(b), True
    # Clip guards against rounding just outside [0, 1].
    return np.clip((b - lo) / (hi - lo), 0.0, 1.0), False


def normalize_confidences(scs: Sequence[SceneConfidence]) -> list:
    norm, degenerate = minmax([s.beta for s in scs])
    return [replace(s, beta_norm=float(v), degenerate=degenerate) for s, v in zip(scs, norm)]


def decide_route(sc: SceneConfidence, tau: float = DEFAULT_TAU) -> RoutingDecision:
    """Supervised iff ``beta_norm >= tau``."""
    if sc.beta_norm is None:
        raise ValidationError(f"scene {sc.scene_id!r} has no normalized confidence")
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    route = SUPERVISED if sc.beta_norm >= tau else UNSUPERVISED
    return RoutingDecision(sc.scene_id, route, sc.beta_norm, tau)


def confidence_report(scs: Sequence[SceneConfidence], tau: float) -> list:
    out = []
    for sc in scs:
        d = decide_route(sc, tau)
        out.append({
            "scene_id": sc.scene_id,
            "beta": sc.beta,
            "beta_norm": sc.beta_norm,
            "route": d.route,
            "tau": tau,
            "degenerate": sc.degenerate,
        })
    return out


def dumps_report(report: list) -> str:
    return json.dumps(report, indent=2) + "\n"
