"""Binary change-detection accuracy: confusion counts, sensitivity, specificity, kappa.

"Changed" is the positive class throughout. Reference pixels labeled 255 are
counted as ignored and excluded from every metric.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .exceptions import ShapeError, ValidationError
from .raster import IGNORE, ChangeMask, Raster


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0
    ignored: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def total(self) -> int:
        return self.n + self.ignored

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.tn + other.tn, self.fp + other.fp,
            self.fn + other.fn, self.ignored + other.ignored,
        )

    def transpose(self) -> "ConfusionMatrix":
        """Swap the roles of prediction and reference."""
        return ConfusionMatrix(self.tp, self.tn, self.fn, self.fp, self.ignored)

    @classmethod
    def pooled(cls, cms: Iterable["ConfusionMatrix"]) -> "ConfusionMatrix":
        out = cls()
        for cm in cms:
            out = out + cm
        return out


def _labels(m) -> np.ndarray:
    return m.labels if isinstance(m, ChangeMask) else np.asarray(m)


def confusion(pred, ref) -> ConfusionMatrix:
    """Tally ``pred`` against ``ref``; change classes >= 1 all count as changed."""
    p = _labels(pred)
    r = _labels(ref)
    if p.shape != r.shape:
        raise ShapeError(f"prediction {p.shape} and reference {r.shape} differ")
    if np.any(p == IGNORE):
        raise ValidationError("predictions may not contain the ignore label")
    valid = r != IGNORE
    pc = p != 0
    rc = r != 0
    tp = int(np.count_nonzero(pc & rc & valid))
    fp = int(np.count_nonzero(pc & ~rc & valid))
    fn = int(np.count_nonzero(~pc & rc & valid))
    tn = int(np.count_nonzero(valid)) - tp - fp - fn
    return ConfusionMatrix(tp, tn, fp, fn, int(r.size - np.count_nonzero(valid)))


def sensitivity(cm: ConfusionMatrix) -> float:
    """Percent of changed reference pixels detected; NaN when there are none."""
    d = cm.tp + cm.fn
    return 100.0 * cm.tp / d if d else math.nan


def specificity(cm: ConfusionMatrix) -> float:
    """Percent of unchanged reference pixels left unflagged; NaN when there are none."""
    d = cm.tn + cm.fp
    return 100.0 * cm.tn / d if d else math.nan


def kappa_with_flag(cm: ConfusionMatrix) -> tuple:
    n = cm.n
    if n == 0:
        raise ValidationError("kappa is undefined for zero compared pixels")
    # (po - pe) / (1 - pe) multiplied through by n^2: exact in integers, one
    # rounding at the end. The denominator vanishes exactly when pe == 1.
    tp, tn, fp, fn = int(cm.tp), int(cm.tn), int(cm.fp), int(cm.fn)
    num = 2 * (tp * tn - fn * fp)
    den = (tp + fp) * (fp + tn) + (tp + fn) * (fn + tn)
    if den == 0:
        return 0.0, True
    return num / den, False


def kappa(cm: ConfusionMatrix) -> float:
    """Cohen's kappa; defined as 0 when expected agreement is 1."""
    return kappa_with_flag(cm)[0]


@dataclass(frozen=True)
class SceneMetrics:
    scene_id: str
    cm: ConfusionMatrix

    @property
    def sensitivity(self) -> float:
        return sensitivity(self.cm)

    @property
    def specificity(self) -> float:
        return specificity(self.cm)

    @property
    def kappa(self) -> float:
        return kappa(self.cm)


def _fmt(v: float, digits: int = 2) -> str:
    return "nan" if math.isnan(v) else f"{v:.{digits}f}"


METRICS_HEADER = ["scene_id", "sensitivity", "specificity", "kappa", "tp", "tn", "fp", "fn", "ignored"]


def metrics_rows(per_scene: Sequence[tuple], extra: Sequence[str] = ()) -> list:
    """Rows for the metrics CSV from ``(scene_id, cm, *extra_values)`` tuples, plus a pooled ALL row."""
    rows = [METRICS_HEADER + list(extra)]
    for item in per_scene:
        sid, cm, *rest = item
        rows.append(_row(sid, cm) + [str(v) for v in rest])
    if per_scene:
        pooled = ConfusionMatrix.pooled(item[1] for item in per_scene)
        rows.append(_row("ALL", pooled) + [""] * len(extra))
    return rows


def _row(sid: str, cm: ConfusionMatrix) -> list:
    k = kappa(cm) if cm.n else math.nan
    return [sid, _fmt(sensitivity(cm)), _fmt(specificity(cm)), _fmt(k),
            str(cm.tp), str(cm.tn), str(cm.fp), str(cm.fn), str(cm.ignored)]


def metrics_csv(per_scene: Sequence[tuple], extra: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(metrics_rows(per_scene, extra))
    return buf.getvalue()


# False colour: white hit, green false alarm, magenta miss.
COLOR_TP = (255, 255, 255)
COLOR_FP = (0, 255, 0)
COLOR_FN = (255, 0, 255)
COLOR_TN = (0, 0, 0)
COLOR_IGNORED = (128, 128, 128)


def falsecolor(pred, ref) -> Raster:
    """RGB composite of prediction vs reference, values in 0..255."""
    p = _labels(pred)
    r = _labels(ref)
    if p.shape != r.shape:
        raise ShapeError(f"prediction {p.shape} and reference {r.shape} differ")
    if np.any(p == IGNORE):
        raise ValidationError("predictions may not contain the ignore label")
    rgb = np.zeros((3,) + p.shape, dtype=np.float32)
    ignored = r == IGNORE
    pc = p != 0
    rc = (r != 0) & ~ignored
    for sel, color in (
        (pc & rc, COLOR_TP),
        (pc & ~rc & ~ignored, COLOR_FP),
        (~pc & rc, COLOR_FN),
        (ignored, COLOR_IGNORED),
    ):
        for ch in range(3):
            rgb[ch][sel] = color[ch]
    return Raster(rgb)
