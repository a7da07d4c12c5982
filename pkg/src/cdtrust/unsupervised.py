"""Change vector analysis with Otsu thresholding, the training-free fallback detector."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np

from .exceptions import ShapeError, ValidationError
from .raster import ChangeMask, NormStats, Raster

logger = logging.getLogger(__name__)

N_BINS = 256


def cva_magnitude(pre, post, stats: Optional[NormStats] = None) -> Raster:
    """Per-pixel Euclidean norm of the standardized spectral difference vector."""
    a = pre.data if isinstance(pre, Raster) else np.asarray(pre, dtype=np.float32)
    b = post.data if isinstance(post, Raster) else np.asarray(post, dtype=np.float32)
    if a.shape != b.shape:
        raise ShapeError(f"pre {a.shape} and post {b.shape} differ")
    diff = b.astype(np.float64) - a.astype(np.float64)
    if stats is not None:
        if stats.band_count != a.shape[0]:
            raise ShapeError(f"stats have {stats.band_count} bands, images have {a.shape[0]}")
        diff /= stats.std[:, None, None]
    return Raster(np.sqrt(np.einsum("chw,chw->hw", diff, diff))[None])


def histogram_bins(values: np.ndarray, bins: int = N_BINS) -> tuple:
    """Bin index of every value over ``[min, max]``; returns ``(counts, lo, hi)``."""
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    idx = np.floor((v - lo) / (hi - lo) * bins).astype(np.int64)
    np.clip(idx, 0, bins - 1, out=idx)
    return np.bincount(idx, minlength=bins), lo, hi


def otsu_index(counts) -> int:
    """Split index ``k`` maximizing between-class variance of a histogram.

    Class 0 holds bins ``< k``. Candidates are ``1 .. len(counts) - 1``; ties
    resolve to the lowest ``k``. The criterion uses integer bin positions in
    exact arithmetic, which ranks candidates identically to bin-centre values
    because centres are an affine function of the index.
    """
    counts = [int(c) for c in np.asarray(counts).ravel()]
    nb = len(counts)
    if nb < 2:
        raise ValidationError("need at least two histogram bins")
    n = sum(counts)
    s = sum(i * c for i, c in enumerate(counts))
    best_k, best_num, best_den = 1, -1, 1
    n0 = s0 = 0
    for k in range(1, nb):
        n0 += counts[k - 1]
        s0 += (k - 1) * counts[k - 1]
        n1 = n - n0
        if n0 == 0 or n1 == 0:
            num, den = 0, 1
        else:
            # n^2 * w0 * w1 * (mu0 - mu1)^2 == (n*s0 - n0*s)^2 / (n0*n1)
            num, den = (n * s0 - n0 * s) ** 2, n0 * n1
        if num * best_den > best_num * den:
            best_k, best_num, best_den = k, num, den
    return best_k


def otsu_threshold(values, bins: int = N_BINS) -> float:
    """Otsu threshold over a ``bins``-bin histogram spanning ``[min, max]``.

    The returned value is the bin edge separating the two classes. With fewer
    than two distinct values the maximum is returned, so ``values > t`` is
    empty.
    """
    v = values.data if isinstance(values, Raster) else np.asarray(values)
    if v.size == 0:
        raise ValidationError("cannot threshold an empty map")
    lo, hi = float(v.min()), float(v.max())
    if lo == hi:
        return hi
    counts, lo, hi = histogram_bins(v, bins)
    k = otsu_index(counts)
    return lo + k * (hi - lo) / bins


def is_degenerate(values) -> bool:
    v = values.data if isinstance(values, Raster) else np.asarray(values)
    return bool(v.min() == v.max())


def threshold_map(magnitude, threshold: float) -> ChangeMask:
    m = magnitude.data[0] if isinstance(magnitude, Raster) else np.asarray(magnitude)
    return ChangeMask((m > threshold).astype(np.uint8))


def unsupervised_change_map(pre, post, stats: Optional[NormStats] = None) -> ChangeMask:
    mag = cva_magnitude(pre, post, stats)
    if is_degenerate(mag):
        logger.warning("constant change magnitude; returning an all-unchanged map")
    return threshold_map(mag, otsu_threshold(mag))
