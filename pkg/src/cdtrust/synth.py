"""Synthetic bi-temporal scenes drawn from a one-dimensional "style" space.

A style stands in for a geographic region: it fixes the spectral signatures
of the background land covers, their texture scale, and the spectral
direction in which real changes move a pixel. Position 0 and position 1 of the
style axis differ in all three, so a model trained on a narrow band of styles
has to extrapolate on distant ones.

Each scene also carries nuisance differences that are *not* labeled as
change (a per-band radiometric gain between dates and small phenology-like
shifts), which a training-free detector cannot tell apart from real change.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from .exceptions import ValidationError
from .raster import ChangeMask, Raster, ScenePair, save_scene, write_manifest

BANDS = 4
N_COVERS = 3

# Background land-cover signatures at the two ends of the style axis (R, G, B, NIR).
_SIG_A = np.array([[0.06, 0.09, 0.05, 0.40], [0.12, 0.11, 0.09, 0.22], [0.20, 0.19, 0.17, 0.25]])
_SIG_B = np.array([[0.32, 0.27, 0.21, 0.30], [0.42, 0.36, 0.28, 0.36], [0.24, 0.22, 0.20, 0.18]])

# Change directions spanning the style axis: at 0 changes brighten the visible
# bands and darken NIR; at 1 they do the reverse.
_DIR_A = np.array([1.0, 1.0, 1.0, -1.0]) / 2.0
_DIR_B = np.array([-1.0, 1.0, -1.0, 1.0]) / 2.0

# Unlabeled seasonal shift: mostly NIR.
_NUISANCE_DIR = np.array([0.1, 0.2, 0.1, 0.97])


@dataclass(frozen=True)
class StyleSpec:
    name: str
    seed: int
    position: float
    base_low: tuple
    base_high: tuple
    texture_freq: tuple = (2.0, 4.0)
    change_density: float = 0.1
    blob_size: tuple = (3.0, 8.0)
    change_magnitude: tuple = (0.22, 0.34)
    contrast: float = 1.0
    noise: float = 0.012
    nuisance_density: float = 0.15
    nuisance_magnitude: float = 0.25
    gain_jitter: float = 0.06
    spectral_position: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.change_density <= 0.5:
            raise ValidationError("change density must lie in (0, 0.5]")
        for lo, hi in (self.texture_freq, self.blob_size, self.change_magnitude):
            if not lo <= hi:
                raise ValidationError("style ranges must be non-empty (low <= high)")
        if any(lo > hi for lo, hi in zip(self.base_low, self.base_high)):
            raise ValidationError("base intensity ranges must be non-empty")
        if self.contrast <= 0:
            raise ValidationError("contrast must be positive")

    @property
    def change_direction(self) -> np.ndarray:
        theta = np.pi * self.position
        d = np.cos(theta) * _DIR_A + np.sin(theta) * _DIR_B
        return d / np.linalg.norm(d)

    def signatures(self) -> np.ndarray:
        p = self.position if self.spectral_position is None else self.spectral_position
        return (1.0 - p) * _SIG_A + p * _SIG_B


def make_style(position: float, seed: int, name: Optional[str] = None, **overrides) -> StyleSpec:
    """Style at ``position`` on the axis; overrides replace any other field."""
    if not 0.0 <= position <= 1.0:
        raise ValidationError("style position must be in [0, 1]")
    sig = (1.0 - position) * _SIG_A + position * _SIG_B
    freq = 2.0 + 4.0 * position
    kw = dict(
        name=name or f"style{position:.3f}",
        seed=seed,
        position=float(position),
        base_low=tuple(float(v) for v in sig.min(axis=0)),
        base_high=tuple(float(v) for v in sig.max(axis=0)),
        texture_freq=(freq, freq + 1.5),
    )
    kw.update(overrides)
    return StyleSpec(**kw)


def _smooth_field(rng, shape, sigma) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    s = f.std()
    return f / s if s > 0 else f


def _blobs(rng, shape, density, size_range) -> np.ndarray:
    """Union of random ellipses until ``density`` of the pixels is covered."""
    h, w = shape
    target = density * h * w
    yy, xx = np.mgrid[0:h, 0:w]
    mask = np.zeros(shape, dtype=bool)
    for _ in range(10000):
        if mask.sum() >= target:
            break
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry, rx = rng.uniform(*size_range, size=2)
        angle = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dy * np.cos(angle) + dx * np.sin(angle)) / ry
        v = (-dy * np.sin(angle) + dx * np.cos(angle)) / rx
        blob = u * u + v * v <= 1.0
        remaining = target - mask.sum()
        if (blob & ~mask).sum() > 1.5 * remaining and mask.any():
            continue
        mask |= blob
    return mask


def generate_scene(style: StyleSpec, rng: np.random.Generator, size: int = 96, scene_id: str = "scene",
                   split: str = "train") -> ScenePair:
    """One pre/post pair with its change mask, drawn from ``style``."""
    shape = (size, size)
    sig = style.signatures()
    jitter = rng.uniform(-0.02, 0.02, size=sig.shape)
    sig = np.clip(sig + jitter, np.asarray(style.base_low) - 0.02, np.asarray(style.base_high) + 0.02)

    freq = rng.uniform(*style.texture_freq)
    cover_sigma = size / (2.0 * freq)
    fields = np.stack([_smooth_field(rng, shape, cover_sigma) for _ in range(N_COVERS)])
    cover = fields.argmax(axis=0)
    base = sig[cover].transpose(2, 0, 1)
    texture = _smooth_field(rng, shape, 1.0) * 0.02 + _smooth_field(rng, shape, cover_sigma / 3) * 0.02
    pre_clean = base + texture[None] * (0.6 + 0.4 * sig[cover].transpose(2, 0, 1) / sig.max())

    changed = _blobs(rng, shape, style.change_density, style.blob_size)
    d = style.change_direction
    mags = ndimage.gaussian_filter(rng.uniform(*style.change_magnitude, size=shape), 2.0)
    new_cover = pre_clean + d[:, None, None] * mags[None]
    post_clean = np.where(changed[None], new_cover, pre_clean)

    nuisance = _blobs(rng, shape, style.nuisance_density, (4.0, 12.0)) & ~changed
    nuis_amp = ndimage.gaussian_filter(nuisance.astype(float), 1.5) * style.nuisance_magnitude
    n_dir = _NUISANCE_DIR / np.linalg.norm(_NUISANCE_DIR)
    post_clean = post_clean + n_dir[:, None, None] * nuis_amp[None] * rng.choice([-1.0, 1.0])
    gain = 1.0 + rng.uniform(-style.gain_jitter, style.gain_jitter, size=BANDS)
    post_clean = post_clean * gain[:, None, None]

    pre = pre_clean + rng.standard_normal(pre_clean.shape) * style.noise
    post = post_clean + rng.standard_normal(post_clean.shape) * style.noise
    if style.contrast != 1.0:
        centre = pre.mean(axis=(1, 2), keepdims=True)
        pre = centre + style.contrast * (pre - centre)
        post = centre + style.contrast * (post - centre)
    return ScenePair(
        scene_id=scene_id,
        pre=Raster(pre.astype(np.float32)),
        post=Raster(post.astype(np.float32)),
        mask=ChangeMask(changed.astype(np.uint8)),
        group=style.name,
        split=split,
    )


def style_pool(kind: str, n: int, rng: np.random.Generator, prefix: str = "") -> list:
    """Styles for ``n`` scenes.

    ``localized`` draws every style from a band of width 0.1 near the start of
    the axis, sharing one group-name prefix. ``diverse`` stratifies the whole
    axis so each scene comes from a different region.
    """
    if n < 1:
        raise ValidationError("need at least one scene")
    if kind == "localized":
        start = rng.uniform(0.0, 0.1)
        pos = np.sort(start + rng.uniform(0.0, 0.1, size=n))
        region = f"{prefix}loc{int(rng.integers(0, 1000)):03d}"
        return [make_style(float(p), int(rng.integers(2 ** 31)), f"{region}-{i}") for i, p in enumerate(pos)]
    if kind == "diverse":
        pos = (np.arange(n) + rng.uniform(0.1, 0.9, size=n)) / n
        return [make_style(float(p), int(rng.integers(2 ** 31)), f"{prefix}div{i}-{p:.2f}")
                for i, p in enumerate(pos)]
    raise ValidationError(f"unknown style pool {kind!r}")


def graded_styles(n: int, rng: np.random.Generator, max_shift: float = 1.0, prefix: str = "") -> list:
    """Styles at evenly graded distance ``g`` in ``[0, max_shift]`` from the start of the axis.

    At full distance the change direction has turned by 0.6 of the axis, the
    background spectra have moved by 0.2, contrast has halved and noise has
    nearly doubled, the way a different region seen by a different sensor
    would.
    """
    out = []
    for j, g in enumerate(np.linspace(0.0, max_shift, n)):
        out.append(make_style(
            float(0.6 * g), int(rng.integers(2 ** 31)), f"{prefix}shift{j:02d}-{g:.2f}",
            spectral_position=float(0.2 * g), contrast=1.0 - 0.5 * g, noise=0.012 + 0.01 * g,
        ))
    return out


def generate_scenes(styles: Sequence[StyleSpec], rng: np.random.Generator, size: int = 96,
                    split: str = "train", prefix: str = "") -> list:
    return [generate_scene(st, rng, size, f"{prefix}{split}{i:02d}", split) for i, st in enumerate(styles)]


def synth_dataset(out_dir, n_train: int, pool: str, seed: int, n_test: int = 0,
                  test_pool: str = "diverse", size: int = 96) -> list:
    """Generate train and test scenes, write their rasters and a manifest; returns the scenes."""
    rng = np.random.Generator(np.random.PCG64(seed))
    scenes = []
    if n_train:
        scenes += generate_scenes(style_pool(pool, n_train, rng), rng, size, "train")
    if n_test:
        styles = graded_styles(n_test, rng) if test_pool == "graded" else style_pool(test_pool, n_test, rng)
        scenes += generate_scenes(styles, rng, size, "test")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = [save_scene(s, out_dir) for s in scenes]
    write_manifest(out_dir / "manifest.json", BANDS, entries)
    return scenes
