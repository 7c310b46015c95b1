"""scikit-learn style wrapper around the staged alignment pipeline."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import bap
from . import tensor as T
from .config import RunConfig
from .data import VideoSample, sample_frames, stack_frames

__all__ = ["DynamicAlignmentClassifier", "check_clips"]


def check_clips(X, *, frames=None, shape=None):
    """Validate a clip batch of shape [N, F, C, H, W] and return it as float32.

    ``frames`` is the minimum clip length; ``shape`` pins (C, H, W).
    """
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5:
        raise ValueError(f"expected clips of shape [N, F, C, H, W], got {X.ndim}-d input {X.shape}")
    if X.shape[0] < 1 or X.shape[1] < 1:
        raise ValueError(f"need at least one clip with at least one frame, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise ValueError("clips contain NaN or infinite values")
    if frames is not None and X.shape[1] < frames:
        raise ValueError(f"clips have {X.shape[1]} frames, the model needs {frames}")
    if shape is not None and X.shape[2] != shape[0]:
        raise ValueError(f"clips have {X.shape[2]} channels, the model was fitted on {shape[0]}")
    if shape is not None and (X.shape[3] < shape[1] or X.shape[4] < shape[2]):
        raise ValueError(f"frames of {X.shape[3]}x{X.shape[4]} are smaller than the model's "
                         f"{shape[1]}x{shape[2]} input")
    return X


class DynamicAlignmentClassifier(ClassifierMixin, BaseEstimator):
    """Video classifier trained by aligning learnable label tokens with clips.

    Parameters mirror :class:`~dynalign.config.RunConfig`. ``frames=None``
    uses every frame of the training clips; ``image_size=None`` uses the
    training frame edge, otherwise frames are randomly cropped to it during
    training and centre-cropped at prediction time.

    Attributes
    ----------
    classes_ : ndarray
        Label values seen in ``fit``, in sorted order.
    checkpoint_ : Checkpoint
        Final training state.
    reports_ : list of TrainReport
        One report per stage (a single one in all-at-once mode).
    """

    def __init__(self, mode="bap", sentences=16, tokens=64, embd=32, tau=0.07,
                 epochs_stage1=40, epochs_stage2=30, epochs_stage3=30,
                 lr_stage1=0.01, lr_stage2=0.01, lr_stage3=0.002, momentum=0.9,
                 batch=64, frames=None, image_size=None, joint_depth=4, joint_shared=True,
                 seed=0):
        self.mode = mode
        self.sentences = sentences
        self.tokens = tokens
        self.embd = embd
        self.tau = tau
        self.epochs_stage1 = epochs_stage1
        self.epochs_stage2 = epochs_stage2
        self.epochs_stage3 = epochs_stage3
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.lr_stage3 = lr_stage3
        self.momentum = momentum
        self.batch = batch
        self.frames = frames
        self.image_size = image_size
        self.joint_depth = joint_depth
        self.joint_shared = joint_shared
        self.seed = seed

    def _config(self, n_classes, X):
        frames = X.shape[1] if self.frames is None else self.frames
        size = min(X.shape[3:]) if self.image_size is None else self.image_size
        params = {k: v for k, v in self.get_params().items() if k not in ("frames", "image_size")}
        return RunConfig(classes=n_classes, frames=frames, data_frames=X.shape[1],
                         image_size=size, channels=X.shape[2], **params)

    def fit(self, X, y, eval_set=None):
        """Train on clips ``X`` [N, F, C, H, W] with labels ``y``.

        ``eval_set=(X_val, y_val)`` is used only to log growth continuity.
        """
        X = check_clips(X, frames=self.frames)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-d with {len(X)} labels, got shape {y.shape}")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        self.config_ = self._config(len(self.classes_), X)
        if self.image_size is not None and self.image_size > min(X.shape[3:]):
            raise ValueError(f"image_size={self.image_size} exceeds the {X.shape[3]}x{X.shape[4]} frames")
        train = [VideoSample(clip, int(k), f"fit-{i}") for i, (clip, k) in enumerate(zip(X, codes))]
        holdout = None
        if eval_set is not None:
            Xv, yv = eval_set
            holdout = (self._prepare(Xv, check=False), self._encode(yv))
        self.checkpoint_, self.reports_ = bap.run_all(self.config_, train, holdout)
        return self

    def _encode(self, y):
        y = np.asarray(y)
        codes = np.searchsorted(self.classes_, y)
        codes = np.clip(codes, 0, len(self.classes_) - 1)
        if not np.array_equal(self.classes_[codes], y):
            raise ValueError("labels outside the classes seen in fit")
        return codes

    def _prepare(self, X, check=True):
        cfg = self.config_
        X = check_clips(X, frames=cfg.frames, shape=(cfg.channels, cfg.image_size, cfg.image_size))
        clips = [sample_frames(VideoSample(clip, 0), cfg.frames, cfg.image_size, start=cfg.eval_start)
                 for clip in X]
        return stack_frames(clips)[0]

    @property
    def model_(self):
        check_is_fitted(self, "checkpoint_")
        return self.checkpoint_.model

    def decision_function(self, X):
        """Cosine similarity of each clip to each class, shape [N, n_classes]."""
        return self.model_.decision_function(self._prepare(X))

    def predict_proba(self, X):
        logits = self.decision_function(X) / self.model_.tau
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "checkpoint_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X):
        """Video features [N, embd] from the final tower."""
        model = self.model_
        with T.no_grad():
            return model.video_features(model.frame_features(self._prepare(X))).data.astype(np.float64)

    def class_features(self):
        """One feature per class, shape [n_classes, embd]."""
        with T.no_grad():
            return self.model_.class_features().data.astype(np.float64)
