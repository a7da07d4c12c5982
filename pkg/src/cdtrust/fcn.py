"""Early-fusion U-Net-shaped FCN producing per-pixel class logits.

Pre- and post-change images are concatenated along the channel axis before the
first layer. There are no dense layers, so any spatial size is accepted: input
is reflect-padded up to a multiple of ``2**depth`` and the logits are cropped
back.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import autograd as ag
from .exceptions import FormatError, ShapeError, ValidationError
from .raster import ChangeMask, NormStats, Raster, standardize

WEIGHTS_MAGIC = b"CDFCN1\x00\x00"
CONFIG_NAME = "__config"
NORM_MEAN_NAME = "__norm_mean"
NORM_STD_NAME = "__norm_std"
_F32_EXACT = 2 ** 24


@dataclass(frozen=True)
class FcnConfig:
    in_bands: int = 4
    num_classes: int = 2
    base_channels: int = 16
    depth: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.in_bands < 1:
            raise ValidationError("in_bands must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.base_channels < 1:
            raise ValidationError("base_channels must be >= 1")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    def widths(self) -> list:
        """Channel width of encoder levels 1..depth followed by the bottleneck."""
        return [self.base_channels * 2 ** i for i in range(self.depth + 1)]


def architecture(cfg: FcnConfig) -> "OrderedDict[str, tuple]":
    """Parameter names and shapes in canonical order; a pure function of ``cfg``."""
    spec: "OrderedDict[str, tuple]" = OrderedDict()
    widths = cfg.widths()

    def block(prefix, cin, cout):
        spec[f"{prefix}.conv1.weight"] = (cout, cin, 3, 3)
        spec[f"{prefix}.conv1.bias"] = (cout,)
        spec[f"{prefix}.conv2.weight"] = (cout, cout, 3, 3)
        spec[f"{prefix}.conv2.bias"] = (cout,)

    cin = 2 * cfg.in_bands
    for level in range(1, cfg.depth + 1):
        block(f"enc{level}", cin, widths[level - 1])
        cin = widths[level - 1]
    block("bottleneck", cin, widths[cfg.depth])
    for level in range(cfg.depth, 0, -1):
        block(f"dec{level}", widths[level] + widths[level - 1], widths[level - 1])
    spec["head.weight"] = (cfg.num_classes, widths[0], 3, 3)
    spec["head.bias"] = (cfg.num_classes,)
    return spec


class FcnModel:
    """Configuration plus named float32 parameter arrays.

    ``norm_stats`` is attached by the trainer so that inference standardizes
    inputs exactly as training did.
    """

    def __init__(self, config: FcnConfig, params: "OrderedDict[str, np.ndarray]",
                 norm_stats: Optional[NormStats] = None):
        expected = architecture(config)
        if list(params) != list(expected):
            raise ValidationError("parameter names do not match the architecture for this config")
        for name, shape in expected.items():
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"parameter {name!r} has shape {params[name].shape}, expected {shape}")
        self.config = config
        self.params = params
        self.norm_stats = norm_stats

    def copy(self) -> "FcnModel":
        return FcnModel(self.config, OrderedDict((k, v.copy()) for k, v in self.params.items()), self.norm_stats)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def __repr__(self):
        return f"FcnModel({self.config}, n_parameters={self.n_parameters()})"


def init_model(cfg: FcnConfig) -> FcnModel:
    """He-normal kernels (variance ``2 / fan_in``) from a PCG64 stream seeded by ``cfg.seed``; zero biases."""
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = OrderedDict()
    for name, shape in architecture(cfg).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return FcnModel(cfg, params)


def as_tensors(model: FcnModel, dtype=None, requires_grad: bool = False) -> "OrderedDict[str, ag.Tensor]":
    return OrderedDict(
        (k, ag.Tensor(v if dtype is None else v.astype(dtype), requires_grad=requires_grad, name=k))
        for k, v in model.params.items()
    )


def network(params: dict, x: ag.Tensor, depth: int, tape: Optional[ag.Tape] = None,
            capture: Optional[dict] = None) -> ag.Tensor:
    """Run the FCN on ``x`` of shape ``(n, 2B, h, w)`` with ``h, w`` divisible by ``2**depth``.

    When ``capture`` is a dict, encoder activations (before pooling) are stored
    under ``"enc1"`` .. ``"enc<depth>"``.
    """

    def block(prefix, t):
        t = ag.relu(ag.conv2d(t, params[f"{prefix}.conv1.weight"], params[f"{prefix}.conv1.bias"], tape), tape)
        return ag.relu(ag.conv2d(t, params[f"{prefix}.conv2.weight"], params[f"{prefix}.conv2.bias"], tape), tape)

    skips = []
    t = x
    for level in range(1, depth + 1):
        t = block(f"enc{level}", t)
        skips.append(t)
        if capture is not None:
            capture[f"enc{level}"] = t.value
        t = ag.maxpool2(t, tape)
    t = block("bottleneck", t)
    for level in range(depth, 0, -1):
        t = ag.upsample2(t, tape)
        t = ag.concat_channels(t, skips[level - 1], tape)
        t = block(f"dec{level}", t)
    return ag.conv2d(t, params["head.weight"], params["head.bias"], tape)


def _as_array(img, what: str) -> np.ndarray:
    if isinstance(img, Raster):
        return img.data
    arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"{what} must be (c, h, w), got {arr.shape}")
    return arr


def reflect_pad(a: np.ndarray, multiple: int) -> np.ndarray:
    """Pad the last two axes at the bottom/right up to a multiple of ``multiple``."""
    h, w = a.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(a, widths, mode=mode)


def fuse(pre, post, model: FcnModel, normalize: bool = True) -> np.ndarray:
    """Standardize (when the model carries stats) and concatenate into a ``(2B, h, w)`` array."""
    pre_a = _as_array(pre, "pre")
    post_a = _as_array(post, "post")
    if pre_a.shape != post_a.shape:
        raise ShapeError(f"pre {pre_a.shape} and post {post_a.shape} differ")
    if pre_a.shape[0] != model.config.in_bands:
        raise ShapeError(f"model expects {model.config.in_bands} bands per image, got {pre_a.shape[0]}")
    if normalize and model.norm_stats is not None:
        pre_a = standardize(pre_a, model.norm_stats)
        post_a = standardize(post_a, model.norm_stats)
    return np.concatenate([pre_a, post_a], axis=0).astype(np.float32)


def forward_logits(m: FcnModel, pre, post, normalize: bool = True) -> Raster:
    """Per-pixel logits ``(K+1, h, w)`` for one scene, same spatial size as the input."""
    x = fuse(pre, post, m, normalize)
    h, w = x.shape[1:]
    xp = reflect_pad(x, m.config.multiple)[None]
    z = network(as_tensors(m), ag.Tensor(xp), m.config.depth)
    return Raster(z.value[0, :, :h, :w])


def predict_from_logits(logits) -> ChangeMask:
    """Argmax over classes; ties resolve to the lower index (toward unchanged)."""
    z = logits.data if isinstance(logits, Raster) else np.asarray(logits)
    return ChangeMask(np.argmax(z, axis=0).astype(np.uint8))


def predict_map(m: FcnModel, pre, post, normalize: bool = True) -> ChangeMask:
    return predict_from_logits(forward_logits(m, pre, post, normalize))


def encoder_features(m: FcnModel, pre, post, level: int, normalize: bool = True) -> Raster:
    """Activations after encoder ``level`` (pre-pooling), nearest-upsampled to input size."""
    if not 1 <= level <= m.config.depth:
        raise ValidationError(f"level must be in 1..{m.config.depth}, got {level}")
    x = fuse(pre, post, m, normalize)
    h, w = x.shape[1:]
    xp = reflect_pad(x, m.config.multiple)[None]
    cap: dict = {}
    network(as_tensors(m), ag.Tensor(xp), m.config.depth, capture=cap)
    f = cap[f"enc{level}"][0]
    scale = 2 ** (level - 1)
    if scale > 1:
        f = np.repeat(np.repeat(f, scale, axis=1), scale, axis=2)
    return Raster(f[:, :h, :w])


# ---------------------------------------------------------------------------
# Weights file


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    out = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def encode_model(m: FcnModel) -> bytes:
    c = m.config
    cfg_values = [c.in_bands, c.num_classes, c.base_channels, c.depth, c.seed]
    if any(not 0 <= v <= _F32_EXACT for v in cfg_values):
        raise ValidationError(
            f"config values must lie in [0, 2**24] to be stored exactly as float32: {cfg_values}"
        )
    tensors = [(CONFIG_NAME, np.array(cfg_values, dtype=np.float32))]
    if m.norm_stats is not None:
        tensors.append((NORM_MEAN_NAME, m.norm_stats.mean.astype(np.float32)))
        tensors.append((NORM_STD_NAME, m.norm_stats.std.astype(np.float32)))
    tensors.extend(m.params.items())
    body = b"".join(_pack_tensor(n, a) for n, a in tensors)
    return WEIGHTS_MAGIC + struct.pack("<I", len(tensors)) + body


def decode_model(buf: bytes) -> FcnModel:
    if buf[:8] != WEIGHTS_MAGIC:
        raise FormatError("not a CDFCN1 weights file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError("truncated weights file")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(dims)) if ndim else 1
        arr = np.frombuffer(take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
        if name in tensors:
            raise FormatError(f"duplicate tensor {name!r}")
        tensors[name] = arr
    if pos != len(buf):
        raise FormatError("trailing bytes after last tensor")
    if not tensors or next(iter(tensors)) != CONFIG_NAME:
        raise FormatError("first tensor must be the embedded config")
    cfg_arr = tensors.pop(CONFIG_NAME)
    if cfg_arr.shape != (5,):
        raise FormatError(f"config pseudo-tensor has shape {cfg_arr.shape}, expected (5,)")
    try:
        cfg = FcnConfig(*(int(v) for v in cfg_arr))
    except ValidationError as exc:
        raise FormatError(f"invalid embedded config: {exc}") from exc
    stats = None
    if NORM_MEAN_NAME in tensors:
        mean = tensors.pop(NORM_MEAN_NAME)
        std = tensors.pop(NORM_STD_NAME)
        stats = NormStats(mean, std)
    expected = architecture(cfg)
    if list(tensors) != list(expected):
        raise FormatError("tensor names/order do not match the architecture of the embedded config")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
    return FcnModel(cfg, tensors, stats)


def save_model(m: FcnModel, path) -> None:
    Path(path).write_bytes(encode_model(m))


def load_model(path) -> FcnModel:
    return decode_model(Path(path).read_bytes())


def config_dict(cfg: FcnConfig) -> dict:
    return asdict(cfg)
