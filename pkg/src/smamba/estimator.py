"""scikit-learn style wrappers around the forecaster and baselines.

``fit`` takes a raw multivariate series ``X[steps, V]``; ``predict`` takes one
lookback window ``[L, V]`` or a stack ``[n, L, V]`` in original units and
returns forecasts in original units.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .data import TimeSeriesDataset, split_and_standardize, window_arrays
from .model import LinearBaseline, ModelConfig, SMambaModel, fit_linear_least_squares, persistence_baseline
from .training import TrainConfig, predict_windows, train


def check_series(X, min_steps: int = 1) -> np.ndarray:
    """Validate a ``[steps, V]`` series of finite floats."""
    return check_array(X, dtype=np.float64, ensure_min_samples=min_steps, ensure_all_finite=True)


def check_windows(X, lookback: int, n_variates: int | None = None) -> tuple[np.ndarray, bool]:
    """Validate ``[L, V]`` or ``[n, L, V]`` windows; returns the stack and whether input was single."""
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected windows shaped [L, V] or [n, L, V], got {X.shape}")
    if X.shape[1] != lookback:
        raise ValueError(f"window length {X.shape[1]} != lookback {lookback}")
    if n_variates is not None and X.shape[2] != n_variates:
        raise ValueError(f"windows have {X.shape[2]} variates, estimator was fitted on {n_variates}")
    if not np.all(np.isfinite(X)):
        raise ValueError("windows contain NaN or infinite values")
    return X, single


class _WindowForecaster(BaseEstimator):
    def _prepare(self, X) -> TimeSeriesDataset:
        X = check_series(X, min_steps=self.lookback + self.horizon)
        names = [f"v{i}" for i in range(X.shape[1])]
        ds = split_and_standardize(TimeSeriesDataset(X, names), self.split_ratios, min_len=self.lookback + self.horizon)
        self.n_features_in_ = X.shape[1]
        self.mean_ = ds.mean
        self.std_ = ds.std
        return ds

    def _standardize(self, X):
        X, single = check_windows(X, self.lookback, self.n_features_in_)
        return (X - self.mean_) / self.std_, single

    def _finish(self, pred, single):
        out = pred * self.std_ + self.mean_
        return out[0] if single else out

    def score(self, X, y) -> float:
        """Negative mean squared error of ``predict(X)`` against ``y``."""
        pred = self.predict(X)
        return -float(np.mean((pred - np.asarray(y, dtype=np.float64)) ** 2))


class SMambaForecaster(_WindowForecaster):
    """Multivariate forecaster built on bidirectional Mamba variate mixing."""

    def __init__(
        self,
        lookback=96,
        horizon=96,
        d_model=128,
        n_layers=2,
        d_state=16,
        expand=2,
        d_conv=4,
        ffn_hidden=None,
        vc_variant="bi_mamba",
        td_variant="ffn",
        n_heads=4,
        use_d_skip=False,
        batch_size=16,
        lr=1e-3,
        max_epochs=200,
        patience=5,
        precision="float32",
        split_ratios=(0.7, 0.1, 0.2),
        random_state=0,
    ):
        self.lookback = lookback
        self.horizon = horizon
        self.d_model = d_model
        self.n_layers = n_layers
        self.d_state = d_state
        self.expand = expand
        self.d_conv = d_conv
        self.ffn_hidden = ffn_hidden
        self.vc_variant = vc_variant
        self.td_variant = td_variant
        self.n_heads = n_heads
        self.use_d_skip = use_d_skip
        self.batch_size = batch_size
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.precision = precision
        self.split_ratios = split_ratios
        self.random_state = random_state

    def fit(self, X, y=None):
        ds = self._prepare(X)
        cfg = ModelConfig(
            lookback=self.lookback, horizon=self.horizon, n_variates=ds.n_variates, d_model=self.d_model,
            n_layers=self.n_layers, d_state=self.d_state, expand=self.expand, d_conv=self.d_conv,
            ffn_hidden=self.ffn_hidden, vc_variant=self.vc_variant, td_variant=self.td_variant,
            n_heads=self.n_heads, use_d_skip=self.use_d_skip, seed=self.random_state,
        )
        tc = TrainConfig(
            batch_size=self.batch_size, lr=self.lr, max_epochs=self.max_epochs,
            patience=min(self.patience, self.max_epochs) or 1, seed=self.random_state, precision=self.precision,
        )
        self.model_ = SMambaModel.initialize(cfg, tc.dtype)
        self.report_ = train(self.model_, ds, tc)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        Z, single = self._standardize(X)
        return self._finish(predict_windows(self.model_, Z), single)


class LinearForecaster(_WindowForecaster):
    """Shared per-variate linear map fitted by least squares on the train split."""

    def __init__(self, lookback=96, horizon=96, split_ratios=(0.7, 0.1, 0.2)):
        self.lookback = lookback
        self.horizon = horizon
        self.split_ratios = split_ratios

    def fit(self, X, y=None):
        ds = self._prepare(X)
        Xw, Yw, _ = window_arrays(ds, "train", self.lookback, self.horizon)
        w, b = fit_linear_least_squares(Xw, Yw)
        self.model_ = LinearBaseline.from_arrays(w, b)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        Z, single = self._standardize(X)
        return self._finish(predict_windows(self.model_, Z), single)


class PersistenceForecaster(BaseEstimator):
    """Repeats the last observed row; ``fit`` only records the variate count."""

    def __init__(self, lookback=96, horizon=96):
        self.lookback = lookback
        self.horizon = horizon

    def fit(self, X, y=None):
        self.n_features_in_ = check_series(X).shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_features_in_")
        W, single = check_windows(X, self.lookback, self.n_features_in_)
        out = persistence_baseline(W, self.horizon)
        return out[0] if single else out

    def score(self, X, y) -> float:
        return -float(np.mean((self.predict(X) - np.asarray(y, dtype=np.float64)) ** 2))
