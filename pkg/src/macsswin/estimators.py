"""scikit-learn style wrappers around the frame and clip classifiers."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data.clips import ClipSample
from .exceptions import ParameterError
from .models import get_config, softmax_scores
from .tensor import Tensor
from .train import ClipDataset, FrameDataset, get_train_config, train_image, train_video
from .validation import check_binary_labels, check_clips, check_images


class _SwinEstimator(ClassifierMixin, TransformerMixin, BaseEstimator):
    _video = False

    def _train_config(self):
        preset = "tiny_video" if self._video else "tiny_image"
        overrides = dict(
            epochs=self.epochs, batch_size=self.batch_size, base_lr=self.learning_rate,
            warmup_epochs=min(self.warmup_epochs, self.epochs - 1), augment=self.augment,
            seed=self.random_state, model=self.preset, model_overrides=dict(self.model_overrides or {}),
        )
        if self.loss_weights is not None:
            overrides["weights"] = tuple(self.loss_weights)
        return get_train_config(preset, **overrides)

    def _check_threshold(self):
        if not 0 < self.decision_threshold < 1:
            raise ParameterError(f"decision_threshold must lie in (0, 1), got {self.decision_threshold}")

    def _dataset(self, X, y=None):
        raise NotImplementedError

    def fit(self, X, y):
        self._check_threshold()
        cfg = self._train_config()
        ds = self._dataset(X, y)
        trainer = train_video if self._video else train_image
        result = trainer(cfg, ds)
        self.model_ = result.model
        self.model_.eval()
        self.history_ = result.log
        self.loss_weights_ = (result.weights.w_x, result.weights.w_y)
        self.n_features_out_ = self.model_.cfg.num_features
        return self

    def _forward_batches(self, X, fn):
        ds = self._dataset(X)
        out = []
        for start in range(0, len(ds), self.batch_size):
            idx = list(range(start, min(start + self.batch_size, len(ds))))
            out.append(fn(Tensor(ds.batch(idx))))
        return np.concatenate(out)

    def decision_function(self, X):
        """Logit margin ``z_Y - z_X`` per sample."""
        check_is_fitted(self, "model_")
        logits = self._forward_batches(X, lambda x: self.model_(x).data)
        return logits[:, 1] - logits[:, 0]

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        p = self._forward_batches(X, lambda x: softmax_scores(self.model_(x)))
        return np.stack([1 - p, p], axis=1)

    def predict(self, X):
        """Labels from the Type-Y score at ``decision_threshold`` (ties go to Y)."""
        self._check_threshold()
        p = self.predict_proba(X)[:, 1]
        return self.classes_[(p >= self.decision_threshold).astype(np.int64)]

    def transform(self, X):
        """Pooled final-stage features, ``(n_samples, num_features)``."""
        check_is_fitted(self, "model_")
        return self._forward_batches(X, lambda x: self.model_.features(x).data)


class MacsSwinClassifier(_SwinEstimator):
    """Frame classifier on RGB frames ``(n, S, S, 3)`` with 0-255 values."""

    def __init__(self, preset="tiny", epochs=30, batch_size=32, learning_rate=1e-3, warmup_epochs=2,
                 loss_weights=None, decision_threshold=0.5, augment=True, random_state=0, model_overrides=None):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_epochs = warmup_epochs
        self.loss_weights = loss_weights
        self.decision_threshold = decision_threshold
        self.augment = augment
        self.random_state = random_state
        self.model_overrides = model_overrides

    def _dataset(self, X, y=None):
        size = get_config(self.preset, **(self.model_overrides or {})).img_size
        X = check_images(X, size)
        if y is None:
            return FrameDataset(X, np.zeros(len(X), dtype=np.int64))
        y01, self.classes_ = check_binary_labels(y, len(X))
        return FrameDataset(X, y01, [("", i) for i in range(len(X))])


class VidMacsSwinClassifier(_SwinEstimator):
    """Clip classifier on ``(n, T, S, S, 3)`` clips; a clip's label is its center frame's."""

    _video = True

    def __init__(self, preset="tiny", epochs=20, batch_size=16, learning_rate=1e-3, warmup_epochs=2,
                 loss_weights=None, decision_threshold=0.5, augment=True, random_state=0, model_overrides=None):
        self.preset = preset
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.warmup_epochs = warmup_epochs
        self.loss_weights = loss_weights
        self.decision_threshold = decision_threshold
        self.augment = augment
        self.random_state = random_state
        self.model_overrides = model_overrides

    def _dataset(self, X, y=None):
        cfg = get_config(self.preset, video=True, **(self.model_overrides or {}))
        X = check_clips(X, cfg.num_frames, cfg.img_size)
        if y is None:
            labels = [0] * len(X)
        else:
            labels, self.classes_ = check_binary_labels(y, len(X))
        videos = {f"clip{i}": X[i] for i in range(len(X))}
        clips = [ClipSample(f"clip{i}", tuple(range(X.shape[1])), int(labels[i])) for i in range(len(X))]
        return ClipDataset(videos, clips)


__all__ = ["MacsSwinClassifier", "VidMacsSwinClassifier"]
