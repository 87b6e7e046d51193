"""Training loops for the sliding-window paradigms and whole-series inference.

Both on/off frameworks are covered: the regression framework trains on
normalised appliance watts with the MAE loss and thresholds denormalised
predictions; the classification framework trains a sigmoid head on on/off
states with binary cross-entropy and cuts probabilities at 0.3.
"""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .evaluation import f1 as f1_counts
from .models import Network, TrainedModel
from .pipeline import WindowedDataset, binarize

logger = logging.getLogger(__name__)

PARADIGMS = ("seq2seq", "seq2point", "fast-seq2point")
DEFAULT_CUTOFF = 0.3
NO_PREDICTION = -1


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf. ``snapshot`` holds the iteration, the offending
    batch indices and the parameters before the failing update."""

    def __init__(self, message: str, snapshot: Dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    paradigm: str = "fast-seq2point"
    framework: str = "regression"
    batch_size: int = 128
    lr: float = 0.001
    max_iterations: int = 1000
    eval_every: int = 100
    patience: int = 10
    validation_fraction: float = 0.1
    seed: int = 0
    cutoff: float = DEFAULT_CUTOFF
    record_batches: bool = False

    def __post_init__(self):
        if self.paradigm not in PARADIGMS:
            raise ValueError(f"paradigm must be one of {PARADIGMS}, got {self.paradigm!r}")
        if self.framework not in ("regression", "classification"):
            raise ValueError(f"framework must be regression or classification, got {self.framework!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must be in [0, 1)")


@dataclass
class IterationRecord:
    iteration: int
    loss: float
    metric: float = float("nan")
    ms: float = float("nan")

    def line(self, timing: bool = True) -> str:
        parts = [f"{self.iteration}", repr(self.loss), repr(self.metric)]
        if timing:
            parts.append(f"{self.ms:.3f}")
        return "\t".join(parts)


@dataclass
class TrainingRun:
    log: List[IterationRecord]
    model: Network
    best_iteration: int = 0
    best_metric: float = float("nan")
    stopped_early: bool = False
    batches: List[np.ndarray] = field(default_factory=list)
    train_index: Optional[np.ndarray] = None
    validation_index: Optional[np.ndarray] = None

    @property
    def ms_per_iteration(self) -> float:
        ms = [r.ms for r in self.log]
        return float(np.median(ms)) if ms else float("nan")

    def log_text(self, timing: bool = True) -> str:
        header = "# wavenilm-train-log v1\n# iteration\tloss\tmetric" + ("\tms" if timing else "") + "\n"
        return header + "".join(r.line(timing) + "\n" for r in self.log)


def _validation_metric(model: Network, ds: WindowedDataset, framework: str, cutoff: float) -> float:
    out = model.predict(ds.inputs)
    if framework == "regression":
        return float(np.mean(np.abs(out - ds.targets)))
    return f1_counts((out > cutoff).astype(np.int8), ds.targets.astype(np.int8)).f1


def train(model: Network, dataset: WindowedDataset, config: TrainConfig,
          validation: Optional[WindowedDataset] = None,
          callback: Optional[Callable[[IterationRecord], None]] = None) -> TrainingRun:
    """Mini-batch Adam training.

    Windows are reshuffled every epoch with a counter-based generator seeded by
    ``config.seed``. Unless a ``validation`` set is passed, a seeded
    ``validation_fraction`` of the windows is held out; every ``eval_every``
    iterations the validation metric (normalised MAE, or F1 at the cut-off) is
    computed and training stops after ``patience`` evaluations without
    improvement. The best parameters seen are restored at the end.
    """
    cfg = model.config
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if cfg.head != config.framework:
        raise ValueError(f"model head {cfg.head!r} does not match framework {config.framework!r}")
    if (dataset.receptive_field + dataset.target_field - 1) != cfg.window_length or \
            dataset.target_field != cfg.target_field:
        raise ValueError(
            f"dataset windows (L={dataset.receptive_field}, r={dataset.target_field}) do not fit the model "
            f"(L={cfg.receptive_field}, r={cfg.target_field})"
        )
    if config.paradigm == "seq2point" and cfg.target_field != 1:
        raise ValueError("seq2point training needs target_field == 1")
    if config.framework == "classification" and not np.isin(dataset.targets, (0, 1)).all():
        raise ValueError("classification targets must be on/off states")

    rng = np.random.Generator(np.random.Philox(config.seed))
    n = len(dataset)
    if validation is None and config.validation_fraction > 0 and n >= 20:
        perm = rng.permutation(n)
        n_val = int(n * config.validation_fraction)
        val_idx = np.sort(perm[:n_val])
        train_idx = np.sort(perm[n_val:])
        validation = dataset.subset(val_idx)
    else:
        val_idx = None
        train_idx = np.arange(n)

    dt = model.dtype
    inputs = dataset.inputs.astype(dt, copy=False)
    targets = dataset.targets.astype(dt, copy=False)
    loss_fn = ad.mae_loss if config.framework == "regression" else ad.bce_loss
    better = (lambda a, b: a < b) if config.framework == "regression" else (lambda a, b: a > b)

    state = ad.AdamState(lr=config.lr)
    run = TrainingRun([], model, train_index=train_idx, validation_index=val_idx)
    best_params = None
    stale = 0
    bs = min(config.batch_size, len(train_idx))
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for it in range(1, config.max_iterations + 1):
        t0 = time.perf_counter()
        if pos + bs > len(order):
            order = rng.permutation(train_idx)
            pos = 0
        batch = order[pos:pos + bs]
        pos += bs
        model.zero_grad()
        out = model.forward(inputs[batch], train=True)
        loss, grad = loss_fn(out, targets[batch])
        if not np.isfinite(loss):
            snapshot = {"iteration": it, "batch": batch.copy(), "params": model.get_parameters(),
                        "adam_step": state.step}
            raise TrainingDiverged(f"non-finite loss at iteration {it}", snapshot)
        model.backward(grad)
        ad.adam_step(model.params, None, state)
        rec = IterationRecord(it, loss)
        if config.record_batches:
            run.batches.append(batch.copy())
        if validation is not None and len(validation) and config.eval_every and it % config.eval_every == 0:
            rec.metric = _validation_metric(model, validation, config.framework, config.cutoff)
            if best_params is None or better(rec.metric, run.best_metric):
                run.best_metric, run.best_iteration = rec.metric, it
                best_params = model.get_parameters()
                stale = 0
            else:
                stale += 1
        rec.ms = (time.perf_counter() - t0) * 1000.0
        run.log.append(rec)
        if callback is not None:
            callback(rec)
        if config.patience and stale >= config.patience:
            run.stopped_early = True
            logger.info("early stop at iteration %d (best %.6g at %d)", it, run.best_metric, run.best_iteration)
            break
    if best_params is not None:
        model.load_parameters(best_params)
    return run


# ---------------------------------------------------------------------------
# inference over whole series


def _tile_starts(T: int, W: int, r: int) -> np.ndarray:
    n = 0 if T < W else (T - W) // r + 1
    return np.arange(n, dtype=np.int64) * r


def predict_series(model: TrainedModel, aggregate) -> np.ndarray:
    """Per-sample predictions for a whole aggregate series (raw watts).

    Non-overlapping target fields are tiled along the series; samples no
    centred window reaches are NaN. Regression outputs are denormalised and
    clamped at 0 W; classification outputs are on-probabilities.
    """
    agg = np.asarray(aggregate, dtype=np.float64)
    cfg = model.config
    W, r, off = cfg.window_length, cfg.target_field, cfg.offset
    pred = np.full(len(agg), np.nan)
    starts = _tile_starts(len(agg), W, r)
    if len(starts) == 0:
        warnings.warn(f"series of length {len(agg)} is shorter than one window ({W})", stacklevel=2)
        return pred
    windows = sliding_window_view(model.aggregate_stats.normalize(agg), W)[starts]
    out = model.network.predict(windows).astype(np.float64)
    if cfg.head == "regression":
        if model.appliance_stats is None:
            raise ValueError("regression model has no appliance normalisation stats")
        out = np.maximum(model.appliance_stats.denormalize(out), 0.0)
    pred[off:off + len(starts) * r] = out.reshape(-1)
    return pred


def _states(values: np.ndarray, on: np.ndarray) -> np.ndarray:
    states = np.full(len(values), NO_PREDICTION, dtype=np.int8)
    ok = ~np.isnan(values)
    states[ok] = on[ok]
    return states


def detect_onoff_regression(model: TrainedModel, aggregate, threshold: Optional[float] = None) -> np.ndarray:
    """Binarise denormalised regression predictions at the on-power threshold.
    Samples without a prediction are ``NO_PREDICTION`` (-1)."""
    if model.config.head != "regression":
        raise ValueError("detect_onoff_regression needs a regression-head model")
    threshold = threshold if threshold is not None else model.threshold
    if threshold is None:
        raise ValueError("no on-power threshold given")
    pred = predict_series(model, aggregate)
    on = np.zeros(len(pred), dtype=np.int8)
    ok = ~np.isnan(pred)
    on[ok] = binarize(pred[ok], threshold)
    return _states(pred, on)


def detect_onoff_classifier(model: TrainedModel, aggregate, cutoff: float = DEFAULT_CUTOFF) -> np.ndarray:
    """On where the classifier's probability is strictly above ``cutoff``."""
    if model.config.head != "classification":
        raise ValueError("detect_onoff_classifier needs a classification-head model")
    prob = predict_series(model, aggregate)
    on = np.zeros(len(prob), dtype=np.int8)
    ok = ~np.isnan(prob)
    on[ok] = prob[ok] > cutoff
    return _states(prob, on)


# ---------------------------------------------------------------------------
# sequence-to-sequence comparison mode


def slice_seq2seq_windows(aggregate, target, window: int, stride: int, model_receptive_field: int,
                          household: int = 0) -> WindowedDataset:
    """Input and target cover the same ``window`` samples.

    Inputs are padded with ``L//2`` zeros (the normalised mean) on both sides
    so a valid-convolution model with target field ``window`` emits one value
    per input sample.
    """
    agg = np.asarray(aggregate, dtype=np.float64)
    tgt = np.asarray(target)
    L = model_receptive_field
    half = L // 2
    if len(agg) < window:
        warnings.warn(f"series of length {len(agg)} is shorter than one window ({window})", stacklevel=2)
        return WindowedDataset(np.zeros((0, window + L - 1)), np.zeros((0, window)), [], [], L, window)
    starts = np.arange(0, len(agg) - window + 1, stride, dtype=np.int64)
    padded = np.pad(agg, (half, half))
    inputs = sliding_window_view(padded, window + L - 1)[starts]
    targets = sliding_window_view(tgt, window)[starts]
    return WindowedDataset(inputs.copy(), targets.copy(), starts, np.full(len(starts), household), L, window)


def average_overlapping(predictions: np.ndarray, starts: np.ndarray, length: int) -> np.ndarray:
    """Mean of all window predictions covering each index (NaN where none)."""
    predictions = np.asarray(predictions, dtype=np.float64)
    window = predictions.shape[1]
    total = np.zeros(length)
    count = np.zeros(length)
    for s, p in zip(starts, predictions):
        total[s:s + window] += p
        count[s:s + window] += 1
    out = np.full(length, np.nan)
    np.divide(total, count, out=out, where=count > 0)
    return out


def seq2seq_train(model: Network, aggregate, target, stride: int, config: TrainConfig) -> TrainingRun:
    """Train ``model`` (target field = window) on overlapping seq2seq windows."""
    ds = slice_seq2seq_windows(aggregate, target, model.config.target_field, stride,
                               model.config.receptive_field)
    if config.paradigm != "seq2seq":
        config = TrainConfig(**{**config.__dict__, "paradigm": "seq2seq"})
    return train(model, ds, config)


def predict_seq2seq(model: Network, aggregate, stride: int = 1) -> np.ndarray:
    """Slide windows with ``stride`` and average the overlapping outputs."""
    agg = np.asarray(aggregate, dtype=np.float64)
    ds = slice_seq2seq_windows(agg, np.zeros(len(agg)), model.config.target_field, stride,
                               model.config.receptive_field)
    if len(ds) == 0:
        return np.full(len(agg), np.nan)
    return average_overlapping(model.predict(ds.inputs), ds.starts, len(agg))
