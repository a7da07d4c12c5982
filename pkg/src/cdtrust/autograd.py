"""Minimal reverse-mode differentiation over 4-D tensors.

Only the operations needed by the change-detection FCN are provided: 3x3
same-size convolution, ReLU, 2x2 max pooling, nearest x2 upsampling, channel
concatenation, cropping and a weighted softmax cross-entropy loss. Every
operation takes an optional :class:`Tape`; when one is given the operation
records a closure that propagates gradients to its inputs.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .exceptions import ShapeError, ValidationError

IGNORE_LABEL = 255


class Tensor:
    """An ``ndarray`` value with an optional gradient buffer."""

    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str = "", dtype=None):
        value = np.asarray(value, dtype=dtype)
        if value.dtype.kind != "f":
            value = value.astype(np.float32)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.value.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of differentiable operations; replayed backwards by :meth:`backward`."""

    def __init__(self, check_finite: bool = False):
        self._records: list = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self._records)

    def record(self, out: Tensor, backward: Callable[[np.ndarray], None]) -> Tensor:
        if self.check_finite and not np.all(np.isfinite(out.value)):
            raise FloatingPointError("non-finite value produced during forward pass")
        out.requires_grad = True
        self._records.append((out, backward))
        return out

    def backward(self, loss: Tensor) -> None:
        if loss.value.size != 1:
            raise ShapeError("backward() needs a scalar loss")
        loss.grad = np.ones_like(loss.value)
        for out, fn in reversed(self._records):
            if out.grad is not None:
                fn(out.grad)
        self._records.clear()


def _needs_grad(*ts: Tensor) -> bool:
    return any(t.requires_grad for t in ts)


def _check4(x: Tensor, what: str) -> None:
    if x.value.ndim != 4:
        raise ShapeError(f"{what} must be 4-D (n, c, h, w), got {x.shape}")


def _im2col(xp: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # (n, c, h, w, 3, 3) -> (n, h, w, c, 3, 3) -> rows of c*9 taps
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)


def conv2d(x: Tensor, k: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, plus bias."""
    _check4(x, "conv2d input")
    n, cin, h, w = x.shape
    if k.value.ndim != 4 or k.shape[2:] != (3, 3):
        raise ShapeError(f"kernel must be (cout, cin, 3, 3), got {k.shape}")
    cout = k.shape[0]
    if k.shape[1] != cin:
        raise ShapeError(f"kernel expects {k.shape[1]} input channels, input has {cin}")
    if b.shape != (cout,):
        raise ShapeError(f"bias must have shape ({cout},), got {b.shape}")

    xp = np.pad(x.value, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = _im2col(xp, h, w)
    kmat = k.value.reshape(cout, cin * 9)
    y = cols @ kmat.T
    y += b.value
    out = Tensor(np.ascontiguousarray(y.reshape(n, h, w, cout).transpose(0, 3, 1, 2)))
    if tape is None or not _needs_grad(x, k, b):
        return out

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        k.accumulate((g2.T @ cols).reshape(k.shape))
        b.accumulate(g2.sum(axis=0))
        if x.requires_grad:
            # Input gradient = correlation of the padded output gradient with
            # the spatially flipped, channel-transposed kernel.
            gcols = _im2col(np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1))), h, w)
            kflip = k.value[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(cout * 9, cin)
            dx = gcols @ kflip
            x.accumulate(dx.reshape(n, h, w, cin).transpose(0, 3, 1, 2))

    return tape.record(out, backward)


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    active = x.value > 0
    out = Tensor(np.where(active, x.value, np.zeros((), dtype=x.dtype)))
    if tape is None or not x.requires_grad:
        return out
    return tape.record(out, lambda g: x.accumulate(g * active))


def maxpool2(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """2x2 max pooling, stride 2; ties route the gradient to the first element in scan order."""
    _check4(x, "maxpool2 input")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    blocks = x.value.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0])
    if tape is None or not x.requires_grad:
        return out

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=x.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        x.accumulate(gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w))

    return tape.record(out, backward)


def upsample2(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Nearest-neighbour x2 upsampling."""
    _check4(x, "upsample2 input")
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.value, 2, axis=2), 2, axis=3))
    if tape is None or not x.requires_grad:
        return out
    return tape.record(out, lambda g: x.accumulate(g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5))))


def concat_channels(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _check4(a, "concat input")
    _check4(b, "concat input")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]
    out = Tensor(np.concatenate([a.value, b.value], axis=1))
    if tape is None or not _needs_grad(a, b):
        return out

    def backward(g):
        a.accumulate(g[:, :ca])
        b.accumulate(g[:, ca:])

    return tape.record(out, backward)


def crop(x: Tensor, h: int, w: int, tape: Optional[Tape] = None) -> Tensor:
    """Keep the top-left ``h x w`` window."""
    _check4(x, "crop input")
    if h > x.shape[2] or w > x.shape[3]:
        raise ShapeError(f"cannot crop {x.shape} to {h}x{w}")
    if (h, w) == x.shape[2:]:
        return x
    out = Tensor(np.ascontiguousarray(x.value[:, :, :h, :w]))
    if tape is None or not x.requires_grad:
        return out

    def backward(g):
        full = np.zeros(x.shape, dtype=x.dtype)
        full[:, :, :h, :w] = g
        x.accumulate(full)

    return tape.record(out, backward)


def log_softmax(z: np.ndarray, axis: int = 1) -> np.ndarray:
    zmax = z.max(axis=axis, keepdims=True)
    shifted = z - zmax
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_ce_loss(logits: Tensor, target, class_weights=None, tape: Optional[Tape] = None) -> Tensor:
    """Per-pixel weighted cross-entropy, averaged over non-ignored pixels.

    Parameters
    ----------
    logits : Tensor
        ``(n, K+1, h, w)`` raw scores.
    target : array of int
        ``(n, h, w)`` labels in ``0..K``; 255 marks pixels that contribute
        neither loss nor gradient.
    class_weights : sequence of float, optional
        One weight per class; all ones when omitted.
    """
    _check4(logits, "logits")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {logits.shape}")
    valid = target != IGNORE_LABEL
    count = int(valid.sum())
    if count == 0:
        raise ValidationError("no valid (non-ignored) pixels in batch")
    if np.any(target[valid] >= k):
        raise ValidationError(f"target labels must lie in 0..{k - 1} or be {IGNORE_LABEL}")
    dt = logits.dtype
    weights = np.ones(k, dtype=dt) if class_weights is None else np.asarray(class_weights, dtype=dt)
    if weights.shape != (k,):
        raise ShapeError(f"expected {k} class weights, got {weights.shape}")

    safe = np.where(valid, target, 0).astype(np.intp)
    logp = log_softmax(logits.value, axis=1)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    pix_w = np.where(valid, weights[safe], np.zeros((), dtype=dt))
    loss = -(pix_w * picked).sum(dtype=dt) / dt.type(count)
    out = Tensor(np.asarray(loss, dtype=dt))
    if tape is None or not logits.requires_grad:
        return out

    def backward(g):
        grad = np.exp(logp)
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
        grad -= onehot
        grad *= (pix_w / dt.type(count))[:, None]
        logits.accumulate(grad * g)

    return tape.record(out, backward)


# ---------------------------------------------------------------------------
# Optimizer


def adam_step(params: dict, grads: dict, state: dict, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One in-place Adam update with bias correction.

    ``state`` maps each parameter name to its ``(m, v)`` moment buffers and is
    created on first use. ``t`` is the 1-based step count.
    """
    if t < 1:
        raise ValidationError("Adam step count t starts at 1")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state:
            state[name] = (np.zeros_like(p), np.zeros_like(p))
        m, v = state[name]
        if m.shape != p.shape:
            raise ShapeError(f"optimizer state for {name!r} has the wrong shape")
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.state: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        adam_step(params, grads, self.state, self.lr, self.t, self.beta1, self.beta2, self.eps)


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(fn: Callable[[dict, Tape], Tensor], inputs: dict, step: float = 1e-4,
               floor: float = 1e-6) -> dict:
    """Compare reverse-mode gradients against central differences in float64.

    ``fn(tensors, tape)`` must build a scalar loss from the dict of tensors.
    Relative error per element is ``|a - n| / max(|a|, |n|, floor)``.

    Returns a report with ``max_rel_error`` overall and per input name.
    """
    values = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}

    def run(vals, with_tape):
        tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in vals.items()}
        tape = Tape() if with_tape else None
        loss = fn(tensors, tape)
        if with_tape:
            tape.backward(loss)
        return float(loss.value), tensors

    _, tensors = run(values, True)
    report = {"per_input": {}}
    worst = 0.0
    for name, base in values.items():
        analytic = tensors[name].grad
        if analytic is None:
            analytic = np.zeros_like(base)
        numeric = np.zeros_like(base)
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp, _ = run(values, False)
            flat[i] = orig - step
            fm, _ = run(values, False)
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        err = float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
        report["per_input"][name] = err
        worst = max(worst, err)
    report["max_rel_error"] = worst
    return report
