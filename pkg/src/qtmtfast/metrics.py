"""Evaluation quantities: time saving, Bjontegaard delta rate, classification scores."""

from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

DEFAULT_QPS = (22, 27, 32, 37)


class RdPoint(NamedTuple):
    rate: float
    quality: float


def ats(t_ori: Sequence[float], t_pro: Sequence[float]) -> float:
    """Mean per-Qp time saving in percent."""
    t_ori = np.asarray(t_ori, dtype=np.float64)
    t_pro = np.asarray(t_pro, dtype=np.float64)
    if t_ori.shape != t_pro.shape or t_ori.size == 0:
        raise ValueError("need one original and one accelerated time per Qp")
    if np.any(t_ori <= 0) or np.any(t_pro <= 0):
        raise ValueError("times must be positive")
    return float(np.mean((t_ori - t_pro) / t_ori) * 100.0)


def _fit(points):
    pts = sorted(points, key=lambda p: p.quality)
    rate = np.array([p.rate for p in pts], dtype=np.float64)
    q = np.array([p.quality for p in pts], dtype=np.float64)
    if np.any(rate <= 0):
        raise ValueError("rates must be positive")
    return np.polyfit(q, np.log10(rate), 3), q.min(), q.max()


def bdbr(anchor: Sequence[RdPoint], test: Sequence[RdPoint]) -> float:
    """Average bitrate difference of ``test`` over ``anchor`` at equal quality, in percent.

    Each curve is fitted by a cubic in quality for log10(rate); the fits are
    integrated over the common quality range.
    """
    anchor = [RdPoint(*p) for p in anchor]
    test = [RdPoint(*p) for p in test]
    if len(anchor) < 4 or len(test) < 4:
        raise ValueError("bdbr needs at least 4 points per curve")
    pa, lo_a, hi_a = _fit(anchor)
    pt, lo_t, hi_t = _fit(test)
    lo, hi = max(lo_a, lo_t), min(hi_a, hi_t)
    if not hi > lo:
        raise ValueError("curves have no quality overlap")
    ia, it = np.polyint(pa), np.polyint(pt)
    area_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    area_t = np.polyval(it, hi) - np.polyval(it, lo)
    return float((10.0 ** ((area_t - area_a) / (hi - lo)) - 1.0) * 100.0)


def confusion_matrix(true_depths, pred_depths, n_classes: int = 6, first: int = 1) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    t = np.asarray(true_depths, dtype=np.int64) - first
    p = np.asarray(pred_depths, dtype=np.int64) - first
    if t.shape != p.shape:
        raise ValueError("true and predicted labels differ in length")
    if t.size and (t.min() < 0 or t.max() >= n_classes or p.min() < 0 or p.max() >= n_classes):
        raise ValueError("label outside class range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def classification_metrics(cm) -> dict:
    """One-vs-rest precision, recall, specificity and accuracy per class, plus macro averages.

    A class with an undefined ratio (zero denominator) scores 0 for it. Also
    reports exact-match accuracy and the share of predictions off by at most one.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError("confusion matrix must be square")
    if np.any(cm < 0):
        raise ValueError("confusion matrix counts must be non-negative")
    total = int(cm.sum())
    if total == 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn

    def ratio(a, b):
        return np.divide(a, b, out=np.zeros_like(a), where=b > 0)

    per = {
        "precision": ratio(tp, tp + fp),
        "recall": ratio(tp, tp + fn),
        "specificity": ratio(tn, tn + fp),
        "accuracy": (tp + tn) / total,
    }
    n = cm.shape[0]
    near = sum(int(cm[i, j]) for i in range(n) for j in range(n) if abs(i - j) <= 1)
    out = {k: v.tolist() for k, v in per.items()}
    out.update({f"mean_{k}": float(v.mean()) for k, v in per.items()})
    out["exact_accuracy"] = float(tp.sum() / total)
    out["within_one"] = near / total
    out["total"] = total
    return out


def overhead(model_time: float, total_time: float) -> float:
    """Share of encode time spent in prediction and ordering bookkeeping, in percent."""
    if model_time < 0 or total_time <= 0:
        raise ValueError("times must be non-negative with a positive total")
    return model_time / total_time * 100.0
