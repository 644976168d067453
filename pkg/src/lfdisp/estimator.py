"""scikit-learn style wrappers around the view stacker and the network."""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .lightfield import LightField, Sample, ViewPattern, stack_sais
from .losses import LossWeights
from .model import VARIANTS, Model, build_model, preset
from .training import TrainConfig, predict, train


def check_stacks(X, channels: Optional[int] = None) -> np.ndarray:
    """Validate ``(N, C, H, W)`` view stacks and return them as float32."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected view stacks of shape (N, C, H, W), got {X.shape}")
    if channels is not None and X.shape[1] != channels:
        raise ValueError(f"stacks have {X.shape[1]} channels, expected {channels}")
    if not np.all(np.isfinite(X)):
        raise ValueError("view stacks contain non-finite values")
    return X


def check_targets(y, X: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"targets shape {y.shape} != {(X.shape[0],) + X.shape[2:]}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets contain non-finite values")
    return y


class SAIStacker(TransformerMixin, BaseEstimator):
    """Select a centered square of views and stack them along channels.

    Accepts a sequence of :class:`LightField` objects or an array of views
    shaped ``(N, rows, cols, H, W, 3)``.
    """

    def __init__(self, variant: int = 9):
        self.variant = variant

    def fit(self, X, y=None):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant}")
        self.pattern_ = ViewPattern.for_variant(self.variant)
        self.n_features_out_ = self.pattern_.channels
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "pattern_")
        fields = _as_lightfields(X)
        return np.concatenate([stack_sais(lf, self.pattern_) for lf in fields])


def _as_lightfields(X) -> Sequence[LightField]:
    if isinstance(X, LightField):
        return [X]
    if isinstance(X, np.ndarray):
        if X.ndim == 5:
            X = X[None]
        if X.ndim != 6 or X.shape[-1] != 3:
            raise ValueError(f"expected views of shape (N, rows, cols, H, W, 3), got {X.shape}")
        return [LightField(v) for v in X]
    fields = list(X)
    if not all(isinstance(f, LightField) for f in fields):
        raise TypeError("expected LightField objects or a views array")
    return fields


class DisparityEstimator(RegressorMixin, BaseEstimator):
    """Trainable per-pixel disparity regressor on ``(N, 3*variant, H, W)`` stacks.

    The default loss weights damp the gradient and normal terms: with equal
    weights their sign-noise on flat targets stalls small models at a
    constant prediction.
    """

    def __init__(self, variant: int = 9, width: str = "desk", epochs: int = 10,
                 lr0: float = 1e-3, batch_size: int = 8, patch_size: int = 32,
                 loss_weights=(1.0, 0.1, 0.1), augment: bool = True, seed: int = 0):
        self.variant = variant
        self.width = width
        self.epochs = epochs
        self.lr0 = lr0
        self.batch_size = batch_size
        self.patch_size = patch_size
        self.loss_weights = loss_weights
        self.augment = augment
        self.seed = seed

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr0=self.lr0, batch_size=self.batch_size, patch_size=self.patch_size,
                           loss_weights=LossWeights(*self.loss_weights), augment=self.augment,
                           seed=self.seed, max_epochs=self.epochs, variant=self.variant,
                           model_preset=self.width, val_fraction=0.0, record_timing=False)

    def fit(self, X, y):
        config = self._train_config()
        X = check_stacks(X, 3 * self.variant)
        y = check_targets(y, X)
        samples = [Sample(x, t, f"sample{i}") for i, (x, t) in enumerate(zip(X, y))]
        model = build_model(preset(self.width, self.variant, self.seed))
        result = train(model, samples, config)
        self.model_: Model = result.model
        self.history_ = result.log
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_stacks(X, self.n_features_in_)
        return predict(self.model_, X)

    def score(self, X, y, sample_weight=None) -> float:
        """Coefficient of determination over all pixels."""
        pred = self.predict(X).ravel().astype(np.float64)
        y = check_targets(y, check_stacks(X)).ravel().astype(np.float64)
        ss_res = np.sum((y - pred) ** 2)
        ss_tot = np.sum((y - y.mean()) ** 2)
        return float(1.0 - ss_res / ss_tot) if ss_tot > 0 else float(ss_res == 0)
