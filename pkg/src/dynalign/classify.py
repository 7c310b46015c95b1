"""Cosine scoring, temperature softmax, cross-entropy and argmax prediction."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import DegenerateFeatureError

__all__ = [
    "DegenerateFeatureError",
    "DEFAULT_TAU",
    "PROB_FLOOR",
    "cosine_sim",
    "class_probs",
    "cross_entropy",
    "predict",
    "similarity_logits",
    "cross_entropy_loss",
]

DEFAULT_TAU = 0.07
PROB_FLOOR = 1e-12


def _vec(x):
    return np.asarray(x.data if isinstance(x, T.Tensor) else x, dtype=np.float64)


def cosine_sim(a, b):
    a, b = _vec(a), _vec(b)
    if a.shape != b.shape or a.ndim != 1:
        raise T.ShapeError("cosine_sim", a.shape, b.shape)
    na, nb = np.sqrt(a @ a), np.sqrt(b @ b)
    if na < 1e-12 or nb < 1e-12:
        raise DegenerateFeatureError("cannot take the cosine of a zero-norm feature")
    return float((a @ b) / (na * nb))


def _check_tau(tau):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def class_probs(sims, tau=DEFAULT_TAU):
    _check_tau(tau)
    z = _vec(sims) / tau
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs, label):
    probs = _vec(probs)
    if not 0 <= label < probs.shape[-1]:
        raise IndexError(f"label {label} outside [0, {probs.shape[-1]})")
    return float(-np.log(max(probs[label], PROB_FLOOR)))


def predict(video_feat, class_feats):
    """Index of the most similar class; ties go to the lowest index."""
    sims = [cosine_sim(video_feat, c) for c in _vec(class_feats)]
    return int(np.argmax(sims))


def similarity_logits(video, classes, tau=DEFAULT_TAU):
    """Differentiable ``cos(video_b, class_i) / tau`` of shape [B, Cls]."""
    _check_tau(tau)
    sims = T.cosine(video.reshape(video.shape[0], 1, video.shape[-1]),
                    classes.reshape(1, classes.shape[0], classes.shape[-1]))
    return sims * (1.0 / tau)


def cross_entropy_loss(logits, labels):
    """Mean cross-entropy over the batch via a fused log-softmax."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,) or (labels < 0).any() or (labels >= c).any():
        raise IndexError(f"labels must be {n} indices in [0, {c})")
    logp = T.log_softmax(logits, axis=-1)
    picked = logp[np.arange(n), labels]
    floor = np.log(PROB_FLOOR)
    if (picked.data < floor).any():
        keep = (picked.data >= floor).astype(np.float64)
        picked = picked * keep + T.Tensor((1 - keep) * floor)
    return -picked.mean()
