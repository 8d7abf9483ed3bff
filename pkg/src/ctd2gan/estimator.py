"""scikit-learn style wrapper around training and scoring."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, TrainConfig
from .data import VideoDataset, flows_from_frames
from .scoring import ScoreSeries, auc, score_dataset
from .training import Models, train


def check_frames(frames) -> np.ndarray:
    """Validate grayscale frames ``[N, h, w]`` or ``[N, h, w, 1]`` in [0, 1]; returns float32 ``[N, h, w, 1]``."""
    arr = np.asarray(frames)
    if arr.ndim == 3:
        arr = arr[..., None]
    if arr.ndim != 4 or arr.shape[-1] != 1:
        raise ValueError(f"frames must be [N, h, w] or [N, h, w, 1], got shape {np.shape(frames)}")
    if not np.issubdtype(arr.dtype, np.number):
        raise ValueError(f"frames must be numeric, got dtype {arr.dtype}")
    arr = arr.astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise ValueError("frames contain NaN or infinite values")
    if arr.min() < 0 or arr.max() > 1:
        raise ValueError(f"frame intensities must lie in [0, 1], got [{arr.min()}, {arr.max()}]")
    return arr


def as_dataset(X, labels=None) -> VideoDataset:
    """Pass datasets through; wrap a frame array as one clip with block-matching flows."""
    if isinstance(X, VideoDataset):
        return X
    frames = check_frames(X)
    clips = ((0, len(frames)),)
    flows = flows_from_frames(frames, clips).astype(np.float32)
    lab = np.zeros(len(frames), np.uint8) if labels is None else np.asarray(labels, dtype=np.uint8)
    return VideoDataset(frames, flows, lab, clips)


class AnomalyDetector(BaseEstimator):
    """Frame-prediction anomaly detector.

    ``fit`` trains on normal video only. ``score_samples`` returns one
    regularity per frame that has five predecessors in its clip (high means
    normal), and ``predict`` marks frames below ``threshold`` as anomalous (1).
    """

    def __init__(self, channel_scale=0.125, n_heads=8, head_channels=4, attention=True,
                 image_critic=True, video_critic=True, epochs=3, batch_size=5, lr=0.0002,
                 n_critic=1, seed=0, max_steps=0, normalization="clip", score_source="mse",
                 image_range="unit", threshold=0.5):
        self.channel_scale = channel_scale
        self.n_heads = n_heads
        self.head_channels = head_channels
        self.attention = attention
        self.image_critic = image_critic
        self.video_critic = video_critic
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.n_critic = n_critic
        self.seed = seed
        self.max_steps = max_steps
        self.normalization = normalization
        self.score_source = score_source
        self.image_range = image_range
        self.threshold = threshold

    def _configs(self, resolution: int) -> tuple[ModelConfig, TrainConfig]:
        model = ModelConfig(resolution=resolution, channel_scale=self.channel_scale, n_heads=self.n_heads,
                            head_channels=self.head_channels, attention=self.attention,
                            image_critic=self.image_critic, video_critic=self.video_critic)
        run = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, lr=self.lr, n_critic=self.n_critic,
                          seed=self.seed, max_steps=self.max_steps)
        return model, run

    def fit(self, X, y=None):
        data = as_dataset(X)
        model_cfg, run_cfg = self._configs(data.extent[0])
        self.models_, self.loss_log_ = train(data, model_cfg, run_cfg, image_range=self.image_range)
        self.n_features_in_ = int(np.prod(data.extent))
        return self

    def _scores(self, X) -> ScoreSeries:
        check_is_fitted(self, "models_")
        data = as_dataset(X)
        if int(np.prod(data.extent)) != self.n_features_in_:
            raise ValueError(f"frames of extent {data.extent} do not match the training extent")
        return score_dataset(self.models_.generator, data, self.normalization, self.score_source, self.image_range)

    def score_samples(self, X) -> np.ndarray:
        return self._scores(X).regularity

    def predict(self, X) -> np.ndarray:
        return (self.score_samples(X) < self.threshold).astype(np.int64)

    def score(self, X, y=None) -> float:
        """Frame-level AUC against ``y`` (per scored frame) or the dataset's own labels."""
        s = self._scores(X)
        labels = s.label if y is None else np.asarray(y)
        return auc(s.regularity, labels)

    @property
    def models(self) -> Models:
        check_is_fitted(self, "models_")
        return self.models_
