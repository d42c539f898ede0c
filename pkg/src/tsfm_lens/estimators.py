"""scikit-learn style wrappers over the tokenizers and the toy forecasters.

Rows of ``X`` are univariate series (samples x time). The wrappers add
parameter handling and input validation; the work is done by the functional
modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .model import ModelConfig, forward, init_weights
from .numerics import Rng
from .synthdata import TimeSeries
from .tokenize import PatchConfig, TokenizerConfig, dequantize, mean_scale, patchify, quantize
from .train import TrainConfig, train


class MeanScaleTokenizer(TransformerMixin, BaseEstimator):
    """Per-row mean scaling followed by uniform binning into token ids."""

    def __init__(self, vocab_size=512, range_low=-15.0, range_high=15.0):
        self.vocab_size = vocab_size
        self.range_low = range_low
        self.range_high = range_high

    def fit(self, X, y=None):
        X = check_array(X)
        self.tokenizer_ = TokenizerConfig(self.vocab_size, self.range_low, self.range_high)
        self.n_features_in_ = X.shape[1]
        return self

    def scales(self, X) -> np.ndarray:
        X = check_array(X)
        return np.array([mean_scale(row)[0] for row in X])

    def transform(self, X):
        check_is_fitted(self, "tokenizer_")
        X = check_array(X)
        out = np.empty(X.shape, dtype=np.int64)
        for i, row in enumerate(X):
            out[i] = quantize(mean_scale(row)[1], self.tokenizer_)
        return out

    def inverse_transform(self, tokens, scales):
        check_is_fitted(self, "tokenizer_")
        tokens = check_array(tokens, dtype=np.int64)
        scales = np.asarray(scales, dtype=np.float64).reshape(-1)
        return np.vstack([dequantize(t, self.tokenizer_, s) for t, s in zip(tokens, scales)])


class InstancePatcher(TransformerMixin, BaseEstimator):
    """Instance normalization and non-overlapping patches, output [samples, patches, patch_len]."""

    def __init__(self, patch_len=16):
        self.patch_len = patch_len

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=self.patch_len)
        self.config_ = PatchConfig(self.patch_len)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_array(X, ensure_min_features=self.patch_len)
        return np.stack([patchify(row, self.config_)[0] for row in X])


class ToyForecaster(RegressorMixin, BaseEstimator):
    """Train a toy forecaster on the rows of ``X`` and forecast ``horizon`` steps per row.

    ``predict`` returns an array [samples, horizon] forecast from each row as context.
    """

    def __init__(self, arch="encoder_decoder", n_layers=2, n_heads=2, d_model=32, d_ff=64,
                 context_len=64, horizon=16, vocab_size=128, patch_len=8, quantile_head=False,
                 steps=200, lr=1e-3, batch_size=8, seed=0):
        self.arch = arch
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.context_len = context_len
        self.horizon = horizon
        self.vocab_size = vocab_size
        self.patch_len = patch_len
        self.quantile_head = quantile_head
        self.steps = steps
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed

    def _model_config(self):
        return ModelConfig(
            arch=self.arch, n_layers=self.n_layers, n_heads=self.n_heads, d_model=self.d_model,
            d_head=self.d_model // self.n_heads, d_ff=self.d_ff, context_len=self.context_len,
            horizon=self.horizon, tokenizer=TokenizerConfig(vocab_size=self.vocab_size),
            patch=PatchConfig(self.patch_len), quantile_head=self.quantile_head,
        )

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_features=2)
        cfg = self._model_config()
        if self.arch == "encoder_decoder":
            loss = "cross_entropy"
        else:
            loss = "quantile" if self.quantile_head else "mse"
        tc = TrainConfig(loss=loss, lr=self.lr, steps=self.steps, batch_size=self.batch_size,
                         seed=self.seed + 2)
        series = [TimeSeries(row) for row in X]
        result = train(init_weights(cfg, Rng(self.seed + 1)), series, tc)
        self.bundle_ = result.bundle
        self.loss_curve_ = np.asarray(result.curve)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "bundle_")
        X = check_array(X, ensure_min_features=2)
        return np.vstack([forward(self.bundle_, row)[0].values[: self.horizon, 0] for row in X])

    def score(self, X, y, sample_weight=None):
        """Negative mean absolute error of forecasts from ``X`` against ``y``."""
        y = check_array(y)
        return -float(np.mean(np.abs(self.predict(X)[:, : y.shape[1]] - y)))
