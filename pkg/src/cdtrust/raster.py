"""Raster data model, CDRAST1 binary I/O, manifests and band normalization.

Rasters are stored planar (channel-major): pixel ``(c, y, x)`` lives at flat
index ``c*h*w + y*w + x``, which is exactly the C-order layout of an array of
shape ``(c, h, w)``.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import CorruptionError, FormatError, ShapeError, ValidationError

logger = logging.getLogger(__name__)

MAGIC = b"CDRAST1\x00"
HEADER = struct.Struct("<8sIIII")
HEADER_SIZE = HEADER.size  # 24

DTYPE_CODES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
DTYPE_NAMES = {"u8": 0, "u16": 1, "f32": 2}

UNCHANGED = 0
CHANGED = 1
IGNORE = 255
MASK_VALUES = (UNCHANGED, CHANGED, IGNORE)


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Raster:
    """A ``(channels, height, width)`` float32 image grid."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[None]
        if data.ndim != 3:
            raise ShapeError(f"raster data must be 3-D (c, h, w), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValidationError(f"raster dimensions must be >= 1, got {data.shape}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.all(np.isfinite(data)):
            raise ValidationError("raster contains NaN or Inf values")
        if data is self.data:
            data = data.copy()
        object.__setattr__(self, "data", _readonly(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


@dataclass(frozen=True, eq=False)
class ChangeMask:
    """Per-pixel labels: 0 unchanged, 1..K change classes (1 for binary), 255 ignore."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim == 3 and labels.shape[0] == 1:
            labels = labels[0]
        if labels.ndim != 2:
            raise ShapeError(f"mask must be 2-D (h, w), got shape {labels.shape}")
        if min(labels.shape) < 1:
            raise ValidationError(f"mask dimensions must be >= 1, got {labels.shape}")
        if labels.dtype.kind == "f" and not np.array_equal(labels, np.round(labels)):
            raise ValidationError("mask labels must be integers")
        if labels.size and (labels.min() < 0 or labels.max() > 255):
            raise ValidationError("mask labels must fit in one byte")
        labels = np.ascontiguousarray(labels, dtype=np.uint8)
        if labels is self.labels:
            labels = labels.copy()
        object.__setattr__(self, "labels", _readonly(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def shape(self) -> tuple:
        return self.labels.shape

    @property
    def valid(self) -> np.ndarray:
        return self.labels != IGNORE

    def check_values(self, num_change_classes: int = 1) -> "ChangeMask":
        allowed = list(range(num_change_classes + 1)) + [IGNORE]
        bad = ~np.isin(self.labels, allowed)
        if bad.any():
            raise ValidationError(
                f"mask contains labels outside {sorted(set(allowed))}: "
                f"{sorted(set(np.unique(self.labels[bad]).tolist()))}"
            )
        return self

    def __eq__(self, other):
        if not isinstance(other, ChangeMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.labels, other.labels)

    def __hash__(self):
        return hash((self.shape, self.labels.tobytes()))


@dataclass(frozen=True)
class ClassScheme:
    num_change_classes: int = 1

    def __post_init__(self):
        if int(self.num_change_classes) < 1:
            raise ValidationError("num_change_classes must be >= 1")

    @property
    def total_classes(self) -> int:
        return self.num_change_classes + 1

    @property
    def is_binary(self) -> bool:
        return self.num_change_classes == 1


@dataclass(frozen=True)
class ScenePair:
    """A co-registered pre/post image pair with optional reference mask."""

    scene_id: str
    pre: Raster
    post: Raster
    mask: Optional[ChangeMask] = None
    group: str = ""
    split: str = "test"

    def __post_init__(self):
        if self.pre.shape != self.post.shape:
            raise ShapeError(
                f"scene {self.scene_id!r}: pre {self.pre.shape} and post {self.post.shape} differ"
            )
        if self.mask is not None and self.mask.shape != self.pre.shape[1:]:
            raise ShapeError(
                f"scene {self.scene_id!r}: mask {self.mask.shape} does not match "
                f"image {self.pre.shape[1:]}"
            )
        if self.split not in ("train", "test"):
            raise ValidationError(f"scene {self.scene_id!r}: split must be 'train' or 'test'")

    @property
    def bands(self) -> int:
        return self.pre.channels

    @property
    def spatial_shape(self) -> tuple:
        return self.pre.shape[1:]

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass(frozen=True)
class SceneEntry:
    scene_id: str
    pre: str
    post: str
    mask: Optional[str]
    group: str
    split: str


@dataclass(frozen=True)
class Manifest:
    band_count: int
    class_scheme: ClassScheme
    entries: tuple = ()
    scenes: tuple = ()
    root: Optional[Path] = None

    @property
    def train(self) -> list:
        return [s for s in self.scenes if s.split == "train"]

    @property
    def test(self) -> list:
        return [s for s in self.scenes if s.split == "test"]

    @property
    def I(self) -> int:  # noqa: E743
        return len(self.train)

    @property
    def J(self) -> int:
        return len(self.test)

    def split(self, name: str) -> list:
        if name not in ("train", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return self.train if name == "train" else self.test

    def scene(self, scene_id: str) -> ScenePair:
        for s in self.scenes:
            if s.scene_id == scene_id:
                return s
        raise ValidationError(f"unknown scene id {scene_id!r}")


@dataclass(frozen=True, eq=False)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    flagged: tuple = field(default=())

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        std = np.asarray(self.std, dtype=np.float64).ravel()
        if mean.shape != std.shape:
            raise ShapeError("mean and std lengths differ")
        if np.any(std <= 0):
            raise ValidationError("standard deviations must be > 0")
        object.__setattr__(self, "mean", _readonly(mean))
        object.__setattr__(self, "std", _readonly(std))
        flagged = tuple(self.flagged) or (False,) * len(mean)
        object.__setattr__(self, "flagged", tuple(bool(f) for f in flagged))

    @property
    def band_count(self) -> int:
        return len(self.mean)

    def __eq__(self, other):
        if not isinstance(other, NormStats):
            return NotImplemented
        return (
            np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
            and self.flagged == other.flagged
        )

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "flagged": list(self.flagged)}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(d["mean"], d["std"], tuple(d.get("flagged", ())))


# ---------------------------------------------------------------------------
# CDRAST1 I/O


def encode_raster(data: np.ndarray, dtype: str = "f32") -> bytes:
    code = DTYPE_NAMES[dtype]
    target = DTYPE_CODES[code]
    data = np.asarray(data)
    if data.ndim == 2:
        data = data[None]
    c, h, w = data.shape
    if target.kind == "u":
        info = np.iinfo(target)
        if data.size and (
            not np.array_equal(data, np.round(data)) or data.min() < info.min or data.max() > info.max
        ):
            raise ValidationError(f"values are not exactly representable as {dtype}")
    payload = np.ascontiguousarray(data, dtype=target).tobytes()
    return HEADER.pack(MAGIC, h, w, c, code) + payload


def decode_raster(buf: bytes) -> tuple:
    """Decode a CDRAST1 buffer into ``(array, dtype_code)``; the array keeps the stored dtype."""
    if len(buf) < HEADER_SIZE:
        if not MAGIC.startswith(bytes(buf[:8])) or len(buf) < len(MAGIC):
            raise FormatError("not a CDRAST1 file (bad magic)")
        raise CorruptionError("truncated CDRAST1 header")
    magic, h, w, c, code = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise FormatError("not a CDRAST1 file (bad magic)")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown dtype code {code}")
    if h == 0 or w == 0 or c == 0:
        raise ValidationError(f"zero dimension in header (h={h}, w={w}, c={c})")
    dt = DTYPE_CODES[code]
    expected = c * h * w * dt.itemsize
    payload = buf[HEADER_SIZE:]
    if len(payload) < expected:
        raise CorruptionError(f"truncated payload: expected {expected} bytes, got {len(payload)}")
    if len(payload) > expected:
        raise CorruptionError(f"trailing bytes after payload ({len(payload) - expected} extra)")
    arr = np.frombuffer(payload, dtype=dt).reshape(c, h, w)
    return arr, code


def read_raster(path) -> Raster:
    """Read a CDRAST1 file; integer payloads are widened to float32 exactly."""
    arr, _ = decode_raster(Path(path).read_bytes())
    return Raster(arr.astype(np.float32))


def write_raster(r: Raster, path, dtype: str = "f32") -> None:
    Path(path).write_bytes(encode_raster(r.data, dtype))


def read_mask(path, num_change_classes: int = 1) -> ChangeMask:
    arr, code = decode_raster(Path(path).read_bytes())
    if code != 0 or arr.shape[0] != 1:
        raise FormatError(f"{path}: a change mask must be single-channel u8")
    return ChangeMask(arr[0]).check_values(num_change_classes)


def write_mask(m: ChangeMask, path) -> None:
    Path(path).write_bytes(encode_raster(m.labels[None], "u8"))


# ---------------------------------------------------------------------------
# Manifests


def load_manifest(path) -> Manifest:
    """Load a manifest and every raster/mask it references, validated."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: malformed manifest JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: manifest must be a JSON object")
    try:
        band_count = int(doc["band_count"])
        scheme = ClassScheme(int(doc.get("num_change_classes", 1)))
        raw_scenes = doc["scenes"]
    except KeyError as exc:
        raise ValidationError(f"{path}: manifest missing key {exc}") from exc
    if band_count < 1:
        raise ValidationError(f"{path}: band_count must be >= 1")

    root = path.parent
    entries, scenes, seen = [], [], set()
    for i, raw in enumerate(raw_scenes):
        sid = str(raw.get("id", ""))
        if not sid:
            raise ValidationError(f"{path}: scene #{i} has no id")
        if sid in seen:
            raise ValidationError(f"duplicate scene id {sid!r}")
        seen.add(sid)
        entry = SceneEntry(
            scene_id=sid,
            pre=raw["pre"],
            post=raw["post"],
            mask=raw.get("mask"),
            group=str(raw.get("group", "")),
            split=str(raw.get("split", "test")),
        )
        try:
            pre = read_raster(root / entry.pre)
            post = read_raster(root / entry.post)
            mask = read_mask(root / entry.mask, scheme.num_change_classes) if entry.mask else None
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"scene {sid!r}: missing file {exc.filename}") from exc
        except (FormatError, ValidationError) as exc:
            raise type(exc)(f"scene {sid!r}: {exc}") from exc
        if pre.channels != band_count:
            raise ShapeError(f"scene {sid!r}: {pre.channels} bands, manifest declares {band_count}")
        try:
            scene = ScenePair(sid, pre, post, mask, entry.group, entry.split)
        except ValidationError as exc:
            raise type(exc)(str(exc)) from exc
        entries.append(entry)
        scenes.append(scene)
    return Manifest(band_count, scheme, tuple(entries), tuple(scenes), root)


def write_manifest(path, band_count: int, entries: Sequence[SceneEntry], num_change_classes: int = 1) -> None:
    doc = {
        "band_count": int(band_count),
        "num_change_classes": int(num_change_classes),
        "scenes": [
            {"id": e.scene_id, "pre": e.pre, "post": e.post, "mask": e.mask, "group": e.group, "split": e.split}
            for e in entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def save_scene(scene: ScenePair, out_dir) -> SceneEntry:
    """Write a scene's rasters into ``out_dir`` and return its manifest entry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sid = scene.scene_id
    write_raster(scene.pre, out_dir / f"{sid}_pre.cdr")
    write_raster(scene.post, out_dir / f"{sid}_post.cdr")
    mask = None
    if scene.mask is not None:
        write_mask(scene.mask, out_dir / f"{sid}_mask.cdr")
        mask = f"{sid}_mask.cdr"
    return SceneEntry(sid, f"{sid}_pre.cdr", f"{sid}_post.cdr", mask, scene.group, scene.split)


# ---------------------------------------------------------------------------
# Normalization


def compute_norm_stats(train_scenes: Sequence[ScenePair]) -> NormStats:
    """Per-band mean and population std pooled over pre and post of all scenes.

    Bands with zero variance get std 1.0 and are flagged. Values are rounded
    to float32 so that a model reloaded from its weights file normalizes
    identically.
    """
    if not train_scenes:
        raise ValidationError("cannot compute normalization statistics from zero scenes")
    bands = {s.bands for s in train_scenes}
    if len(bands) != 1:
        raise ShapeError(f"scenes disagree on band count: {sorted(bands)}")
    b = bands.pop()
    n = 0
    total = np.zeros(b)
    for s in train_scenes:
        for r in (s.pre, s.post):
            total += r.data.reshape(b, -1).sum(axis=1, dtype=np.float64)
            n += r.height * r.width
    mean = total / n
    sq = np.zeros(b)
    for s in train_scenes:
        for r in (s.pre, s.post):
            d = r.data.reshape(b, -1).astype(np.float64) - mean[:, None]
            sq += np.einsum("ij,ij->i", d, d)
    std = np.sqrt(sq / n)
    flagged = ~(std > 0)
    if flagged.any():
        logger.warning("zero-variance bands %s assigned std 1.0", np.flatnonzero(flagged).tolist())
    std = np.where(flagged, 1.0, std)
    mean = mean.astype(np.float32).astype(np.float64)
    std = std.astype(np.float32).astype(np.float64)
    return NormStats(mean, std, tuple(flagged.tolist()))


def standardize(data: np.ndarray, stats: NormStats) -> np.ndarray:
    if data.shape[0] != stats.band_count:
        raise ShapeError(f"raster has {data.shape[0]} bands, stats have {stats.band_count}")
    mean = stats.mean.astype(np.float32)[:, None, None]
    std = stats.std.astype(np.float32)[:, None, None]
    return (data - mean) / std


def normalize_scene(s: ScenePair, stats: NormStats) -> ScenePair:
    """Map each band ``x -> (x - mean_b) / std_b`` in pre and post; the mask is untouched.

    Not idempotent: applying it twice standardizes twice.
    """
    return replace(
        s,
        pre=Raster(standardize(s.pre.data, stats)),
        post=Raster(standardize(s.post.data, stats)),
    )
