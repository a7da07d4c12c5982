"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .exceptions import ShapeError, ValidationError
from .raster import ChangeMask, Raster, ScenePair


def as_scene(item, index: int = 0, mask=None, split: str = "test") -> ScenePair:
    """Coerce a ScenePair, a ``(pre, post)`` pair or a ``(2, B, h, w)`` array into a ScenePair."""
    if isinstance(item, ScenePair):
        if mask is None:
            return item
        return ScenePair(item.scene_id, item.pre, item.post, as_mask(mask), item.group, item.split)
    if isinstance(item, np.ndarray) and item.ndim == 4 and item.shape[0] == 2:
        pre, post = item[0], item[1]
    elif isinstance(item, (tuple, list)) and len(item) == 2:
        pre, post = item
    else:
        raise ValidationError(
            f"sample {index}: expected a ScenePair, a (pre, post) pair or a (2, B, h, w) array"
        )
    pre = pre if isinstance(pre, Raster) else Raster(np.asarray(pre, dtype=np.float32))
    post = post if isinstance(post, Raster) else Raster(np.asarray(post, dtype=np.float32))
    return ScenePair(f"sample{index:04d}", pre, post, as_mask(mask) if mask is not None else None, "", split)


def as_mask(m) -> ChangeMask:
    return m if isinstance(m, ChangeMask) else ChangeMask(np.asarray(m))


def check_scenes(X, y: Optional[Sequence] = None, require_labels: bool = False,
                 split: str = "test") -> list:
    """Validate a batch of scenes; ``y`` (one mask per scene) overrides stored masks."""
    if isinstance(X, ScenePair):
        X = [X]
    if isinstance(X, np.ndarray) and X.ndim == 4:
        X = [X]
    X = list(X)
    if not X:
        raise ValidationError("no scenes given")
    if y is not None:
        y = list(y)
        if len(y) != len(X):
            raise ValidationError(f"got {len(X)} scenes but {len(y)} masks")
    scenes = [as_scene(x, i, None if y is None else y[i], split) for i, x in enumerate(X)]
    bands = {s.bands for s in scenes}
    if len(bands) != 1:
        raise ShapeError(f"scenes disagree on band count: {sorted(bands)}")
    if require_labels:
        for s in scenes:
            if s.mask is None:
                raise ValidationError(f"scene {s.scene_id!r} has no change mask")
    return scenes


def check_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ValidationError(f"tau must be in [0, 1], got {tau}")
    return tau
