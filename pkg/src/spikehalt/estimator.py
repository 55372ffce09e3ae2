"""scikit-learn style wrapper around the two-phase recipe."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .data import Dataset, channel_stats, make_batches
from .errors import DimensionError
from .model import ModelConfig, SpikeHaltNet
from .train import TrainConfig, train_phase


def check_images(X, channels: int | None = None) -> np.ndarray:
    """Coerce ``X`` to float32 (N, C, H, W) in [0, 1].

    Accepts uint8 (scaled by 1/255) or float arrays, either 4-D or flattened
    to (N, 3*32*32).
    """
    X = np.asarray(X)
    if X.ndim == 2:
        if X.shape[1] != 3 * 32 * 32:
            raise DimensionError(f"flat input needs 3072 columns, got {X.shape[1]}")
        X = X.reshape(-1, 3, 32, 32)
    if X.ndim != 4:
        raise DimensionError(f"expected (N, C, H, W) images, got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("found an empty array")
    if channels is not None and X.shape[1] != channels:
        raise DimensionError(f"expected {channels} channels, got {X.shape[1]}")
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / np.float32(255)
    elif not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"non-numeric input dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError("input contains NaN or infinity")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1] (or be uint8)")
    return X


class SpikeHaltClassifier(ClassifierMixin, BaseEstimator):
    """Spiking transformer image classifier with token halting.

    ``fit`` pretrains with halting off, then fine-tunes with the ponder loss
    when ``halting`` is true. ``eps`` is the inference halting threshold slack
    and can be changed after fitting with ``set_params``.
    """

    def __init__(self, timesteps=4, blocks=4, embed_dim=64, heads=4, mlp_ratio=2.0,
                 conv_stages=((16, 3, 1, True), (32, 3, 1, True), (64, 3, 1, True)),
                 alpha=-5.0, beta=0.0, eps=0.01, delta_p=1e-3, embed_mode="i_sps", halting=True,
                 pretrain_epochs=10, finetune_epochs=10, batch_size=64, lr=1e-3,
                 weight_decay=1e-4, optimizer="adamw", random_state=0):
        self.timesteps = timesteps
        self.blocks = blocks
        self.embed_dim = embed_dim
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.conv_stages = conv_stages
        self.alpha = alpha
        self.beta = beta
        self.eps = eps
        self.delta_p = delta_p
        self.embed_mode = embed_mode
        self.halting = halting
        self.pretrain_epochs = pretrain_epochs
        self.finetune_epochs = finetune_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.random_state = random_state

    def _model_config(self, X, n_classes) -> ModelConfig:
        return ModelConfig(
            timesteps=self.timesteps, blocks=self.blocks, image_size=tuple(X.shape[2:]),
            in_channels=X.shape[1], embed_dim=self.embed_dim, heads=self.heads,
            mlp_ratio=self.mlp_ratio,
            conv_stages=None if self.conv_stages is None else [list(s) for s in self.conv_stages],
            num_classes=n_classes, alpha=self.alpha, beta=self.beta, eps_infer=self.eps,
            delta_p=self.delta_p, embed_mode=self.embed_mode, halting=self.halting,
            seed=int(self.random_state or 0))

    def fit(self, X, y):
        X = check_images(X)
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(X):
            raise ValueError(f"y must be 1-D with {len(X)} entries")
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        ds = Dataset(X, codes, len(self.classes_))
        self.input_stats_ = channel_stats(ds)
        with T.default_dtype(np.float32):
            self.model_ = SpikeHaltNet(self._model_config(X, len(self.classes_)))
        seed = int(self.random_state or 0)
        common = dict(batch=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
                      optimizer=self.optimizer, seed=seed)
        self.history_ = []
        res = train_phase(self.model_, ds, TrainConfig(epochs=self.pretrain_epochs, phase="pretrain",
                                                       **common), normalize_with=self.input_stats_)
        self.history_ += res.metrics
        if self.halting and self.finetune_epochs:
            res = train_phase(self.model_, ds, TrainConfig(epochs=self.finetune_epochs,
                                                           phase="halting_finetune", **common),
                              normalize_with=self.input_stats_)
            self.history_ += res.metrics
        self.model_.eval()
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _forward_all(self, X, batch=100):
        check_is_fitted(self, "model_")
        X = check_images(X, self.model_.cfg.in_channels)
        ds = Dataset(X, np.zeros(len(X), dtype=np.int64), len(self.classes_))
        self.model_.eval()
        logits, feats, tokens = [], [], []
        with T.no_grad():
            for xb, _ in make_batches(ds, batch, 0, self.input_stats_, shuffle=False):
                out = self.model_.forward(xb, eps=self.eps)
                logits.append(out.logits.data)
                feats.append(out.extra["features"])
                tokens.append(out.trace.avg_tokens(axis=0))
        return np.concatenate(logits), np.concatenate(feats), np.concatenate(tokens)

    def decision_function(self, X) -> np.ndarray:
        return self._forward_all(X)[0]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """Pooled token representation fed to the classifier head, (N, embed_dim)."""
        return self._forward_all(X)[1]

    def token_usage(self, X) -> np.ndarray:
        """Fraction of (timestep, block, token) slots each sample actually processed."""
        return self._forward_all(X)[2]
