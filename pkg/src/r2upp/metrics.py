"""Hybrid deep-supervision loss and hard-mask segmentation metrics."""
from __future__ import annotations

import csv
import io
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .tensor import Tensor, _result

CLAMP = 1e-7
DICE_EPS = 1e-7


def _two_channel(y: np.ndarray) -> np.ndarray:
    return np.concatenate([1.0 - y, y], axis=1)


def hybrid_loss(labels, probs: Tensor) -> Tensor:
    """Pixel-wise cross entropy plus per-pixel soft dice, averaged over pixels.

    ``-(1/N) * sum_c sum_n [y log p + 2 y p / (y^2 + p^2 + eps)]`` where N is
    the number of pixels in the batch. A single-channel (binary) map is scored
    through its two-channel view ``(1 - p, p)`` so background pixels count.
    """
    probs = probs if isinstance(probs, Tensor) else Tensor(probs)
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != probs.shape:
        raise ShapeError(f"label shape {y.shape} does not match prediction shape {probs.shape}")
    if y.ndim != 4:
        raise ShapeError(f"labels must be NCHW, got {y.shape}")
    binary = y.shape[1] == 1
    raw = probs.data
    p_raw = _two_channel(raw) if binary else raw
    yy = _two_channel(y) if binary else y
    p = np.clip(p_raw, CLAMP, 1.0 - CLAMP)
    npix = y.shape[0] * y.shape[2] * y.shape[3]

    den = yy * yy + p * p + DICE_EPS
    terms = yy * np.log(p) + 2.0 * yy * p / den
    value = -terms.sum() / npix

    def backward(g):
        dterm = yy / p + 2.0 * yy * (den - 2.0 * p * p) / (den * den)
        inside = (p_raw > CLAMP) & (p_raw < 1.0 - CLAMP)
        dp = -float(g) * dterm * inside / npix
        if binary:
            dp = dp[:, 1:2] - dp[:, 0:1]
        return [dp]

    return _result(np.asarray(value), [probs], backward, "hybrid_loss")


def total_loss(labels, heads: Sequence[Tensor], weights: Sequence[float] | None = None) -> Tensor:
    """Weighted sum of per-head hybrid losses; weights default to all ones."""
    heads = list(heads)
    if weights is None:
        weights = [1.0] * len(heads)
    weights = [float(w) for w in weights]
    if len(weights) != len(heads) or not heads:
        raise ShapeError(f"{len(heads)} heads but {len(weights)} loss weights")
    losses = [hybrid_loss(labels, h) for h in heads]
    value = weights[0] * losses[0].data
    for w, l in zip(weights[1:], losses[1:]):
        value = value + w * l.data

    def backward(g):
        return [g * w for w in weights]

    return _result(np.asarray(value), losses, backward, "total_loss")


# ---------------------------------------------------------------------------
# hard-mask metrics
# ---------------------------------------------------------------------------

class Confusion(NamedTuple):
    tp: int
    tn: int
    fp: int
    fn: int


def _binary(mask, what: str) -> np.ndarray:
    a = np.asarray(mask)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise DataError(f"{what} mask must be binary (0/1)")
    return a.astype(bool)


def _pair(gt, pred) -> tuple[np.ndarray, np.ndarray]:
    g, p = _binary(gt, "ground-truth"), _binary(pred, "predicted")
    if g.shape != p.shape:
        raise ShapeError(f"mask shapes differ: {g.shape} vs {p.shape}")
    return g, p


def confusion_counts(gt, pred) -> Confusion:
    g, p = _pair(gt, pred)
    tp = int(np.count_nonzero(g & p))
    tn = int(np.count_nonzero(~g & ~p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    return Confusion(tp, tn, fp, fn)


def _ratio(num: int, den: int) -> float:
    # an empty denominator means vacuous agreement
    return 1.0 if den == 0 else num / den


def dice(gt, pred) -> float:
    c = confusion_counts(gt, pred)
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def iou(gt, pred) -> float:
    c = confusion_counts(gt, pred)
    return _ratio(c.tp, c.tp + c.fp + c.fn)


def accuracy(gt, pred) -> float:
    c = confusion_counts(gt, pred)
    return _ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn)


def sensitivity(gt, pred) -> float:
    c = confusion_counts(gt, pred)
    return _ratio(c.tp, c.tp + c.fn)


def specificity(gt, pred) -> float:
    c = confusion_counts(gt, pred)
    return _ratio(c.tn, c.tn + c.fp)


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return (np.asarray(probs) >= threshold).astype(np.uint8)


METRIC_NAMES = ("dice", "iou", "accuracy", "sensitivity", "specificity")


def all_metrics(gt, pred) -> dict[str, float]:
    c = confusion_counts(gt, pred)
    return {
        "dice": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn),
        "accuracy": _ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn),
        "sensitivity": _ratio(c.tp, c.tp + c.fn),
        "specificity": _ratio(c.tn, c.tn + c.fp),
    }


def report_csv(rows: Sequence[dict]) -> str:
    """Serialise metric rows as ``dataset,model,dice,iou,accuracy,sensitivity,specificity``."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("dataset", "model") + METRIC_NAMES)
    for r in rows:
        writer.writerow([r["dataset"], r["model"]] + [repr(float(r[k])) for k in METRIC_NAMES])
    return buf.getvalue()
