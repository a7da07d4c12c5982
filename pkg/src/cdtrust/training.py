"""Patch-based training of the FCN and split-level evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .exceptions import ShapeError, ValidationError
from .fcn import FcnConfig, FcnModel, as_tensors, init_model, network, predict_map, save_model
from .metrics import ConfusionMatrix, confusion
from .raster import IGNORE, ScenePair, compute_norm_stats, standardize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 10
    patch_size: int = 64
    batch_size: int = 8
    patches_per_scene_per_epoch: int = 32
    class_weighting: str = "inverse_frequency"
    augment: str = "d4"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValidationError("learning_rate must be >= 0")
        for name in ("epochs", "patch_size", "batch_size", "patches_per_scene_per_epoch"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")
        if self.class_weighting not in ("none", "inverse_frequency"):
            raise ValidationError(f"unknown class_weighting {self.class_weighting!r}")
        if self.augment not in ("none", "d4"):
            raise ValidationError(f"unknown augment {self.augment!r}")

    def check_model(self, cfg: FcnConfig) -> None:
        if self.patch_size % cfg.multiple:
            raise ValidationError(f"patch_size {self.patch_size} is not divisible by 2**depth = {cfg.multiple}")

    def digest(self) -> str:
        """Stable hash of the protocol; compared runs must share it."""
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainReport:
    losses: list
    config: dict
    model_config: dict
    config_hash: str
    seed: int
    steps: int
    wall_seconds: float
    model_path: Optional[str] = None
    class_weights: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2) + "\n"


def class_counts(scenes: Sequence[ScenePair], num_classes: int) -> np.ndarray:
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in scenes:
        if s.mask is None:
            raise ValidationError(f"scene {s.scene_id!r} has no change mask")
        lab = s.mask.labels
        lab = lab[lab != IGNORE]
        if lab.size and lab.max() >= num_classes:
            raise ValidationError(f"scene {s.scene_id!r} has labels >= {num_classes}")
        counts += np.bincount(lab, minlength=num_classes)[:num_classes]
    return counts


def compute_class_weights(train_scenes: Sequence[ScenePair], num_classes: int = 2) -> np.ndarray:
    """Inverse-frequency weights ``N_valid / ((K+1) * N_k)``; absent classes get 0."""
    counts = class_counts(train_scenes, num_classes)
    total = int(counts.sum())
    if total == 0:
        raise ValidationError("no labeled pixels in the training scenes")
    w = np.zeros(num_classes)
    present = counts > 0
    if not present.all():
        logger.warning("classes %s absent from training labels; weight set to 0",
                       np.flatnonzero(~present).tolist())
    w[present] = total / (num_classes * counts[present])
    return w


def _mask_array(scene: ScenePair) -> np.ndarray:
    if scene.mask is None:
        return np.full(scene.spatial_shape, IGNORE, dtype=np.uint8)
    return scene.mask.labels


def sample_patches(scene: ScenePair, n: int, patch_size: int, rng: np.random.Generator,
                   arrays: Optional[tuple] = None) -> list:
    """Draw ``n`` patches with uniform top-left corners.

    Returns ``(pre, post, mask)`` array triples. A scene smaller than the patch
    is reflect-padded (mask padded with the ignore label) and returned whole on
    every draw. ``arrays`` lets callers pass pre-normalized image arrays.
    """
    pre, post = arrays if arrays is not None else (scene.pre.data, scene.post.data)
    mask = _mask_array(scene)
    h, w = mask.shape
    if h < patch_size or w < patch_size:
        ph, pw = max(0, patch_size - h), max(0, patch_size - w)
        mode = "reflect" if min(h, w) > 1 and ph < h and pw < w else "edge"
        pre = np.pad(pre, ((0, 0), (0, ph), (0, pw)), mode=mode)
        post = np.pad(post, ((0, 0), (0, ph), (0, pw)), mode=mode)
        mask = np.pad(mask, ((0, ph), (0, pw)), constant_values=IGNORE)
        h, w = mask.shape
    out = []
    for _ in range(n):
        y = int(rng.integers(0, h - patch_size + 1))
        x = int(rng.integers(0, w - patch_size + 1))
        sl = (slice(y, y + patch_size), slice(x, x + patch_size))
        out.append((pre[(slice(None),) + sl], post[(slice(None),) + sl], mask[sl]))
    return out


def d4_transform(a: np.ndarray, k: int) -> np.ndarray:
    """Element ``k`` (0..7) of the dihedral group on the last two axes: ``k % 4`` quarter turns, then a flip if ``k >= 4``."""
    if not 0 <= k < 8:
        raise ValidationError("d4 element index must be in 0..7")
    out = np.rot90(a, k % 4, axes=(-2, -1))
    if k >= 4:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def augment_d4(triple: tuple, rng: Optional[np.random.Generator] = None, k: Optional[int] = None) -> tuple:
    """Apply one random (or the ``k``-th) dihedral transform identically to pre, post and mask."""
    pre, post, mask = triple
    if pre.shape[-1] != pre.shape[-2] or mask.shape[-1] != mask.shape[-2]:
        raise ShapeError(f"d4 augmentation needs square patches, got {pre.shape[-2:]}")
    if k is None:
        k = int(rng.integers(0, 8))
    return d4_transform(pre, k), d4_transform(post, k), d4_transform(mask, k)


def _batches(scenes, arrays, tcfg: TrainConfig, rng: np.random.Generator):
    patches = []
    for scene, arr in zip(scenes, arrays):
        patches.extend(sample_patches(scene, tcfg.patches_per_scene_per_epoch, tcfg.patch_size, rng, arr))
    if tcfg.augment == "d4":
        patches = [augment_d4(p, rng) for p in patches]
    order = rng.permutation(len(patches))
    for start in range(0, len(order), tcfg.batch_size):
        chunk = [patches[i] for i in order[start:start + tcfg.batch_size]]
        x = np.stack([np.concatenate([p[0], p[1]], axis=0) for p in chunk]).astype(np.float32)
        y = np.stack([p[2] for p in chunk])
        yield x, y


def loss_and_grads(model: FcnModel, x: np.ndarray, y: np.ndarray, class_weights=None) -> tuple:
    """Weighted CE loss of one batch and gradients for every parameter."""
    params = as_tensors(model, requires_grad=True)
    tape = ag.Tape()
    logits = network(params, ag.Tensor(x), model.config.depth, tape)
    loss = ag.softmax_ce_loss(logits, y, class_weights, tape)
    tape.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.value)) for k, t in params.items()}
    return float(loss.value), grads


def train(scenes: Sequence[ScenePair], model_cfg: FcnConfig, train_cfg: TrainConfig,
          out_path=None, init: Optional[FcnModel] = None, callback=None) -> tuple:
    """Train the FCN on the labeled training scenes.

    Every scene in ``scenes`` is used (pass ``manifest.train``).
    Normalization statistics come from ``scenes`` and are attached to the
    returned model. Deterministic for fixed ``model_cfg.seed`` and
    ``train_cfg.seed``.

    Returns
    -------
    model : FcnModel
    report : TrainReport
    """
    train_scenes = list(scenes)
    if not train_scenes:
        raise ValidationError("training split is empty")
    for s in train_scenes:
        if s.mask is None:
            raise ValidationError(f"training scene {s.scene_id!r} has no change mask")
        if s.bands != model_cfg.in_bands:
            raise ShapeError(f"scene {s.scene_id!r} has {s.bands} bands, model expects {model_cfg.in_bands}")
        s.mask.check_values(model_cfg.num_classes - 1)
    train_cfg.check_model(model_cfg)

    t0 = time.perf_counter()
    stats = compute_norm_stats(train_scenes)
    arrays = [(standardize(s.pre.data, stats), standardize(s.post.data, stats)) for s in train_scenes]
    weights = None
    if train_cfg.class_weighting == "inverse_frequency":
        weights = compute_class_weights(train_scenes, model_cfg.num_classes)

    model = init.copy() if init is not None else init_model(model_cfg)
    model.norm_stats = stats
    opt = ag.Adam(lr=train_cfg.learning_rate)
    rng = np.random.Generator(np.random.PCG64(train_cfg.seed))
    losses = []
    for epoch in range(train_cfg.epochs):
        total, nb = 0.0, 0
        for x, y in _batches(train_scenes, arrays, train_cfg, rng):
            if not np.any(y != IGNORE):
                continue
            loss, grads = loss_and_grads(model, x, y, weights)
            opt.step(model.params, grads)
            total += loss
            nb += 1
        losses.append(total / nb if nb else math.nan)
        if callback is not None:
            callback(epoch, losses[-1])
        logger.debug("epoch %d loss %.5f", epoch + 1, losses[-1])

    report = TrainReport(
        losses=losses,
        config=asdict(train_cfg),
        model_config=asdict(model_cfg),
        config_hash=train_cfg.digest(),
        seed=train_cfg.seed,
        steps=opt.t,
        wall_seconds=time.perf_counter() - t0,
        model_path=str(out_path) if out_path is not None else None,
        class_weights=[] if weights is None else [float(w) for w in weights],
    )
    if out_path is not None:
        out_path = Path(out_path)
        save_model(model, out_path)
        out_path.with_suffix(".report.json").write_text(report.to_json(), encoding="utf-8")
    return model, report


def evaluate_split(model: FcnModel, scenes: Sequence[ScenePair], split: Optional[str] = "test",
                   predict=None) -> tuple:
    """Per-scene confusion matrices and their pooled sum.

    ``predict(scene) -> ChangeMask`` overrides the model's own prediction.
    """
    selected = [s for s in scenes if split is None or s.split == split]
    per_scene = {}
    for s in selected:
        if s.mask is None:
            raise ValidationError(f"scene {s.scene_id!r} has no reference mask")
        pred = predict(s) if predict is not None else predict_map(model, s.pre, s.post)
        per_scene[s.scene_id] = confusion(pred, s.mask)
    return per_scene, ConfusionMatrix.pooled(per_scene.values())
