"""scikit-learn style wrappers around the sequence-to-point models.

``X`` is a 1-D aggregate series in watts and ``y`` the matching appliance
series, both on a common sample grid. Predictions have the length of ``X``;
samples that no window reaches are NaN (regressor) or -1 (classifier).
"""
from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.utils.validation import check_consistent_length, check_is_fitted, column_or_1d

from .evaluation import f1 as f1_counts
from .evaluation import mae as mae_metric
from .models import ModelConfig, TrainedModel, build_model
from .pipeline import binarize, compute_norm_stats, filter_invalid, slice_windows, WindowedDataset
from .training import (NO_PREDICTION, TrainConfig, detect_onoff_classifier, predict_series, train)


def _series(values, name):
    arr = column_or_1d(np.asarray(values, dtype=np.float64))
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains NaN or infinite values")
    if np.any(arr < 0):
        raise ValueError(f"{name} contains negative watts")
    return arr


class _Seq2PointBase(BaseEstimator):
    _head = "regression"

    def __init__(self, family="wavenet", layers=None, receptive_field=None, target_field=10,
                 residual_channels=32, skip_channels=64, hidden_size=64, batch_size=128,
                 learning_rate=0.001, max_iter=1000, eval_every=100, patience=10,
                 validation_fraction=0.1, threshold=None, dtype="float32", random_state=0):
        self.family = family
        self.layers = layers
        self.receptive_field = receptive_field
        self.target_field = target_field
        self.residual_channels = residual_channels
        self.skip_channels = skip_channels
        self.hidden_size = hidden_size
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.max_iter = max_iter
        self.eval_every = eval_every
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.threshold = threshold
        self.dtype = dtype
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        layers, L = self.layers, self.receptive_field
        if layers is None and L is None:
            layers = 6
        return ModelConfig(family=self.family, layers=layers, receptive_field=L,
                           target_field=self.target_field, residual_channels=self.residual_channels,
                           skip_channels=self.skip_channels, hidden_size=self.hidden_size,
                           head=self._head, seed=int(self.random_state), dtype=self.dtype)

    def _targets(self, ds: WindowedDataset):
        raise NotImplementedError

    def fit(self, X, y):
        agg = _series(X, "X")
        app = _series(y, "y")
        check_consistent_length(agg, app)
        cfg = self._model_config()
        self.aggregate_stats_ = compute_norm_stats([agg], "aggregate")
        self._prepare_targets(app)
        ds = filter_invalid(slice_windows(agg, app, cfg.receptive_field, cfg.target_field), agg, app)
        if len(ds) == 0:
            raise ValueError(f"series of length {len(agg)} yields no valid training window "
                             f"(window length {cfg.window_length})")
        ds = WindowedDataset(self.aggregate_stats_.normalize(ds.inputs), self._targets(ds), ds.starts,
                             ds.households, cfg.receptive_field, cfg.target_field)
        network = build_model(cfg)
        tc = TrainConfig(framework=self._head, batch_size=self.batch_size, lr=self.learning_rate,
                         max_iterations=self.max_iter, eval_every=self.eval_every, patience=self.patience,
                         validation_fraction=self.validation_fraction, seed=int(self.random_state))
        self.run_ = train(network, ds, tc)
        self.n_iter_ = len(self.run_.log)
        self.model_ = TrainedModel(network, self.aggregate_stats_, self.appliance_stats_,
                                   "appliance", self.threshold)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "model_")
        return _series(X, "X")


class Seq2PointRegressor(RegressorMixin, _Seq2PointBase):
    """Appliance power from aggregate power, trained with the MAE loss."""

    _head = "regression"

    def _prepare_targets(self, app):
        self.appliance_stats_ = compute_norm_stats([app], "appliance")

    def _targets(self, ds):
        return self.appliance_stats_.normalize(ds.targets)

    def predict(self, X):
        agg = self._check_X(X)
        return predict_series(self.model_, agg)

    def score(self, X, y, sample_weight=None):
        """Negative MAE over predictable samples (higher is better)."""
        pred = self.predict(X)
        return -mae_metric(pred, column_or_1d(y), ~np.isnan(pred))


class Seq2PointClassifier(ClassifierMixin, _Seq2PointBase):
    """On/off state from aggregate power with a sigmoid head.

    ``y`` is either appliance watts (binarised at ``threshold``) or 0/1 states
    when ``threshold`` is None.
    """

    _head = "classification"

    def __init__(self, family="wavenet", layers=None, receptive_field=None, target_field=10,
                 residual_channels=32, skip_channels=64, hidden_size=64, batch_size=128,
                 learning_rate=0.001, max_iter=1000, eval_every=100, patience=10,
                 validation_fraction=0.1, threshold=None, dtype="float32", random_state=0,
                 cutoff=0.3):
        super().__init__(family, layers, receptive_field, target_field, residual_channels, skip_channels,
                         hidden_size, batch_size, learning_rate, max_iter, eval_every, patience,
                         validation_fraction, threshold, dtype, random_state)
        self.cutoff = cutoff

    def _prepare_targets(self, app):
        self.appliance_stats_ = None
        if self.threshold is None and not np.isin(app, (0, 1)).all():
            raise ValueError("y must be 0/1 states unless a threshold is given")
        self.classes_ = np.array([0, 1])

    def _targets(self, ds):
        if self.threshold is None:
            return ds.targets.astype(np.int8)
        return binarize(ds.targets, self.threshold)

    def predict_proba(self, X):
        """(n, 2) array of [P(off), P(on)]; NaN rows where no window reaches."""
        agg = self._check_X(X)
        p = predict_series(self.model_, agg)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        agg = self._check_X(X)
        return detect_onoff_classifier(self.model_, agg, self.cutoff)

    def score(self, X, y, sample_weight=None):
        """F1 over predictable samples."""
        states = self.predict(X)
        truth = column_or_1d(np.asarray(y, dtype=np.float64))
        if self.threshold is not None:
            truth = binarize(truth, self.threshold)
        keep = states != NO_PREDICTION
        return f1_counts(states[keep], truth[keep]).f1
