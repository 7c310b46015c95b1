"""WAR/UAR metrics and the frame-order shuffle ablation."""

from __future__ import annotations

import io
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .rng import stream

__all__ = ["MetricsReport", "compute_metrics", "shuffle_eval", "shuffle_frames"]


@dataclass
class MetricsReport:
    war: float
    uar: float
    recall: np.ndarray  # NaN for classes without true samples
    confusion: np.ndarray  # [true, pred] counts

    def to_csv(self):
        out = io.StringIO()
        out.write("metric,value\n")
        out.write(f"war,{self.war:.6f}\n")
        out.write(f"uar,{self.uar:.6f}\n")
        for k, r in enumerate(self.recall):
            out.write(f"recall_{k},{'' if np.isnan(r) else f'{r:.6f}'}\n")
        n = self.confusion.shape[0]
        out.write("\nconfusion," + ",".join(f"pred_{k}" for k in range(n)) + "\n")
        for k, row in enumerate(self.confusion):
            out.write(f"true_{k}," + ",".join(str(int(v)) for v in row) + "\n")
        return out.getvalue()


def compute_metrics(preds, labels, cls):
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labels.shape:
        raise ValueError(f"{preds.size} predictions for {labels.size} labels")
    if labels.size == 0:
        raise ValueError("metrics need at least one sample")
    for name, arr in (("predictions", preds), ("labels", labels)):
        if arr.min() < 0 or arr.max() >= cls:
            raise ValueError(f"{name} must lie in [0, {cls})")
    confusion = np.zeros((cls, cls), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    true = confusion.sum(axis=1)
    correct = np.diag(confusion)
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(true > 0, correct / np.maximum(true, 1), np.nan)
    # exact rationals, rounded once, so the result does not depend on summation order
    war = Fraction(int(correct.sum()), labels.size)
    present = [Fraction(int(c), int(n)) for c, n in zip(correct, true) if n]
    uar = sum(present) / len(present)
    return MetricsReport(float(war), float(uar), recall, confusion)


def shuffle_frames(X, seed):
    """Copy of X [N, F, ...] with each clip's frames permuted independently."""
    X = np.asarray(X)
    out = np.empty_like(X)
    for i in range(X.shape[0]):
        out[i] = X[i, stream(seed, "shuffle-frames", i).permutation(X.shape[1])]
    return out


def shuffle_eval(model, X, y, seed, cls=None):
    """Metrics on the clips as given and with frame order scrambled.

    ``model`` is anything with ``predict(X) -> class indices``.
    """
    y = np.asarray(y)
    cls = int(cls if cls is not None else y.max() + 1)
    normal = compute_metrics(model.predict(X), y, cls)
    shuffled = compute_metrics(model.predict(shuffle_frames(X, seed)), y, cls)
    return normal, shuffled
