"""Pixel-wise segmentation scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from e5sh.core import ClassId, LabeledMask

N_CLASSES = len(ClassId)
DEFAULT_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


@dataclass(frozen=True)
class PixelConfusion:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    total: int

    def __add__(self, other: "PixelConfusion") -> "PixelConfusion":
        return PixelConfusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn,
                              self.total + other.total)


@dataclass(frozen=True)
class Score:
    p: float
    r: float
    f1: float
    degenerate: bool = False


def _classes(m) -> np.ndarray:
    return m.classes if isinstance(m, LabeledMask) else np.asarray(m)


def confusion(pred, gt) -> PixelConfusion:
    p = _classes(pred).ravel().astype(np.int64)
    g = _classes(gt).ravel().astype(np.int64)
    if _classes(pred).shape != _classes(gt).shape:
        raise ValueError("prediction and ground truth sizes differ")
    joint = np.bincount(g * N_CLASSES + p, minlength=N_CLASSES * N_CLASSES)
    joint = joint.reshape(N_CLASSES, N_CLASSES)  # [gt, pred]
    tp = np.diag(joint).copy()
    fp = joint.sum(axis=0) - tp
    fn = joint.sum(axis=1) - tp
    return PixelConfusion(tp, fp, fn, int(p.size))


def _ratio(num, den) -> tuple[float, bool]:
    if den == 0:
        return 0.0, True
    return num / den, False


def score(tp: int, fp: int, fn: int) -> Score:
    p, dp = _ratio(tp, tp + fp)
    r, dr = _ratio(tp, tp + fn)
    f1, df = _ratio(2 * p * r, p + r)
    return Score(p, r, f1, dp or dr or df)


def scores(conf: PixelConfusion) -> dict[ClassId, Score]:
    return {c: score(int(conf.tp[c]), int(conf.fp[c]), int(conf.fn[c])) for c in ClassId}


def ap_ar(pred: LabeledMask, gt, thresholds=DEFAULT_THRESHOLDS) -> dict[ClassId, tuple[float, float]]:
    """Mean precision and recall over confidence thresholds, per class.

    At threshold t a pixel predicted with confidence below t counts as a
    Background prediction.
    """
    thresholds = list(thresholds)
    if not thresholds:
        raise ValueError("at least one threshold is required")
    conf = pred.confidence_float()
    ps = np.zeros((len(thresholds), N_CLASSES))
    rs = np.zeros_like(ps)
    for i, t in enumerate(thresholds):
        cls = np.where(conf < t, ClassId.BACKGROUND, pred.classes)
        for c, s in scores(confusion(cls, gt)).items():
            ps[i, c] = s.p
            rs[i, c] = s.r
    ap = ps.mean(axis=0)
    ar = rs.mean(axis=0)
    return {c: (float(ap[c]), float(ar[c])) for c in ClassId}
