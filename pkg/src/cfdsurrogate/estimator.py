"""Scikit-learn style wrapper around the encoder-decoder surrogate."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import r2_score
from sklearn.utils.validation import check_is_fitted

from . import checkpoint
from .collective import local_group
from .model import ModelDims, forward, init_params
from .optim import DEFAULT_LR, AdamState
from .tensor import resolve_dtype
from .training import EarlyStopping, TrainingDiverged, TrainingLog, data_parallel_step


def _check_windows(X, dtype, n_features=None, name="X"):
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError(f"{name} must be [samples, window, features], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError(f"{name} has no samples")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"{name} must be numeric")
    X = X.astype(dtype, copy=False)
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains NaN or infinity")
    if n_features is not None and X.shape[2] != n_features:
        raise ValueError(f"{name} has {X.shape[2]} features, estimator was fitted with {n_features}")
    return X


def _check_targets(y, n_samples):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 2:
        y = y[:, None, :]
    if y.ndim != 3 or y.shape[0] != n_samples:
        raise ValueError(f"y must be [samples, horizon, features] or [samples, features] matching {n_samples} samples")
    if not np.all(np.isfinite(y)):
        raise ValueError("y contains NaN or infinity")
    return y


class Seq2SeqSurrogate(RegressorMixin, BaseEstimator):
    """LSTM encoder, repeated context, LSTM decoder and a two-layer dense head.

    Trained with mean absolute error and Adam on inputs ``[n, window, F]``
    and targets ``[n, horizon, F]``. A 2-D ``y`` means ``horizon=1`` and
    makes :meth:`predict` return 2-D output too.
    """

    def __init__(self, encoder_units=200, decoder_units=200, head_units=100, epochs=20, patience=10,
                 batch_size=14, lr=DEFAULT_LR, seed=0, precision="f32", shuffle=True):
        self.encoder_units = encoder_units
        self.decoder_units = decoder_units
        self.head_units = head_units
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.precision = precision
        self.shuffle = shuffle

    def _validate_hyper(self):
        for name in ("encoder_units", "decoder_units", "head_units", "epochs", "patience", "batch_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        return resolve_dtype(self.precision)

    def fit(self, X, y, eval_set=None):
        dtype = self._validate_hyper()
        X = _check_windows(X, dtype)
        y_2d = np.ndim(y) == 2
        y = _check_targets(y, X.shape[0])
        if y.shape[2] != X.shape[2]:
            raise ValueError("targets must have as many features as the inputs")
        if X.shape[0] < self.batch_size:
            raise ValueError(f"{X.shape[0]} samples cannot fill one batch of {self.batch_size}")
        if eval_set is not None:
            Xv, yv = eval_set
            Xv = _check_windows(Xv, dtype, X.shape[2], "eval X")
            yv = _check_targets(yv, Xv.shape[0])

        self.dims_ = ModelDims(X.shape[2], X.shape[1], y.shape[1], self.encoder_units,
                               self.decoder_units, self.head_units)
        self.params_ = init_params(self.dims_, self.seed, dtype)
        self.optimizer_ = AdamState.zeros_like(self.params_, lr=self.lr)
        self.history_ = TrainingLog(stop_reason="max-epochs")
        group = local_group()
        stopper = EarlyStopping(self.patience)
        order = np.arange(X.shape[0])
        steps = X.shape[0] // self.batch_size
        for epoch in range(1, self.epochs + 1):
            if self.shuffle:
                np.random.default_rng([self.seed, epoch]).shuffle(order)
            losses = []
            for step in range(steps):
                ids = order[step * self.batch_size:(step + 1) * self.batch_size]
                self.params_, self.optimizer_, loss = data_parallel_step(
                    self.params_, self.optimizer_, X[ids], y[ids], group, self.dims_.horizon)
                if not math.isfinite(loss):
                    raise TrainingDiverged(f"loss became {loss} at epoch {epoch}, step {step}")
                losses.append(loss)
            train = float(np.mean(losses))
            val = float(np.mean(np.abs(self._forward(Xv) - yv))) if eval_set is not None else train
            self.history_.train_loss.append(train)
            self.history_.val_loss.append(val)
            if stopper.update(epoch, val):
                self.history_.stop_reason = "early-stop"
                break
        self.n_features_in_ = X.shape[2]
        self._y_2d = y_2d
        return self

    def _forward(self, X, chunk=256):
        out = [forward(self.params_, X[i:i + chunk], self.dims_.horizon)[0] for i in range(0, X.shape[0], chunk)]
        return np.concatenate(out).astype(np.float64)

    def predict(self, X):
        check_is_fitted(self, ["params_", "dims_"])
        X = _check_windows(X, self.params_["enc.kernel"].dtype, self.n_features_in_)
        if X.shape[1] != self.dims_.window:
            raise ValueError(f"window of {X.shape[1]} steps, estimator expects {self.dims_.window}")
        pred = self._forward(X)
        return pred[:, 0] if self._y_2d else pred

    def score(self, X, y, sample_weight=None):
        pred = self.predict(X).reshape(len(X), -1)
        return r2_score(np.asarray(y).reshape(len(X), -1), pred, sample_weight=sample_weight)

    def save(self, path) -> None:
        check_is_fitted(self, ["params_", "dims_"])
        checkpoint.save(path, self.dims_, self.params_, self.optimizer_)

    @classmethod
    def load(cls, path) -> "Seq2SeqSurrogate":
        dims, params, state = checkpoint.load(path)
        est = cls(dims.encoder_units, dims.decoder_units, dims.head_units,
                  precision="f32" if params["enc.kernel"].dtype == np.float32 else "f64")
        est.dims_, est.params_ = dims, params
        est.optimizer_ = state if state is not None else AdamState.zeros_like(params)
        est.n_features_in_ = dims.flat_dim
        est._y_2d = dims.horizon == 1
        return est
