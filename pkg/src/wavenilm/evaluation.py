"""Disaggregation and on/off metrics, naive baselines and report files."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from .pipeline import NormalizationStats, evaluation_mask

REPORT_HEADER = "# wavenilm-report v1"


class UndefinedMetricError(ValueError):
    pass


def _pair(pred, truth, mask=None):
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(truth, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"prediction length {p.size} != truth length {t.size}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool).ravel()
        p, t = p[mask], t[mask]
    return p, t


def mae(pred, truth, mask=None) -> float:
    """Mean absolute error in watts over the (optionally masked) points."""
    p, t = _pair(pred, truth, mask)
    if p.size == 0:
        raise UndefinedMetricError("MAE undefined: no points left after exclusion")
    return float(np.mean(np.abs(p - t)))


def sae(pred, truth, mask=None) -> float:
    """|sum(pred) - sum(truth)| / sum(truth) over the whole period."""
    p, t = _pair(pred, truth, mask)
    total = float(t.sum())
    if total <= 0:
        raise UndefinedMetricError("SAE undefined: true energy over the period is zero")
    return abs(float(p.sum()) - total) / total


@dataclass(frozen=True)
class F1Result:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def precision(self) -> float:
        d = self.tp + self.fp
        return self.tp / d if d else 0.0

    @property
    def recall(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def f1(pred_states, truth_states, mask=None) -> F1Result:
    """Confusion counts for binary state sequences; precision, recall and F1
    are 0 when their denominators are."""
    p, t = _pair(pred_states, truth_states, mask)
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise ValueError("f1 expects binary state sequences")
    p, t = p.astype(bool), t.astype(bool)
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    return F1Result(tp, fp, fn, tn)


@dataclass
class MetricsReport:
    appliance: str
    model: str
    receptive_field: int = 0
    target_field: int = 0
    mae: float = float("nan")
    sae: float = float("nan")
    precision: float = float("nan")
    recall: float = float("nan")
    f1: float = float("nan")
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    points: int = 0
    excluded: int = 0

    def sort_key(self):
        return (self.appliance, self.model, self.receptive_field, self.target_field)


def evaluate(pred_watts, truth_watts, aggregate_watts, appliance: str, model: str,
             threshold: Optional[float] = None, pred_states=None,
             receptive_field: int = 0, target_field: int = 0) -> MetricsReport:
    """Metrics over the points that survive exclusion.

    Excluded: points without a prediction (NaN) and points where the aggregate
    is zero or below the appliance reading. Energy metrics use ``pred_watts``;
    F1 uses ``pred_states`` if given, else ``pred_watts >= threshold``.
    """
    truth = np.asarray(truth_watts, dtype=np.float64)
    pred = np.asarray(pred_watts, dtype=np.float64) if pred_watts is not None else None
    valid = evaluation_mask(aggregate_watts, truth)
    if pred is not None:
        valid &= ~np.isnan(pred)
    if pred_states is not None:
        ps = np.asarray(pred_states)
        valid &= ps >= 0
    report = MetricsReport(appliance, model, receptive_field, target_field,
                           points=int(valid.sum()), excluded=int((~valid).sum()))
    if pred is not None:
        report.mae = mae(pred, truth, valid)
        try:
            report.sae = sae(pred, truth, valid)
        except UndefinedMetricError:
            report.sae = float("nan")
    if threshold is not None or pred_states is not None:
        if pred_states is None:
            pred_states = np.where(np.isnan(pred), 0, pred >= threshold).astype(np.int8)
        truth_states = (truth >= threshold).astype(np.int8) if threshold is not None else None
        if truth_states is None:
            raise ValueError("threshold needed to binarise the ground truth")
        res = f1(np.asarray(pred_states)[valid], truth_states[valid])
        report.precision, report.recall, report.f1 = res.precision, res.recall, res.f1
        report.tp, report.fp, report.fn, report.tn = res.tp, res.fp, res.fn, res.tn
    return report


def baseline_always_zero(truth_watts, aggregate_watts, appliance: str) -> MetricsReport:
    truth = np.asarray(truth_watts, dtype=np.float64)
    return evaluate(np.zeros_like(truth), truth, aggregate_watts, appliance, "always-zero")


def baseline_always_mean(truth_watts, aggregate_watts, appliance: str,
                         train_stats: NormalizationStats) -> MetricsReport:
    """Predict the training-household mean appliance draw everywhere."""
    truth = np.asarray(truth_watts, dtype=np.float64)
    return evaluate(np.full_like(truth, train_stats.mean), truth, aggregate_watts, appliance, "always-mean")


def overall(values: Sequence[float]):
    """Mean and population std across appliances."""
    v = np.asarray([x for x in values if np.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std())


# ---------------------------------------------------------------------------
# files

_FIELDS = [f.name for f in dataclasses.fields(MetricsReport)]
_INT_FIELDS = {"receptive_field", "target_field", "tp", "fp", "fn", "tn", "points", "excluded"}
_STR_FIELDS = {"appliance", "model"}


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(reports: Iterable[MetricsReport], path, notes: Sequence[str] = ()):
    """One ``key=value`` record per line, sorted by (appliance, model, L, r).

    ``notes`` are written as ``#`` comment lines under the header.
    """
    ordered = sorted(reports, key=MetricsReport.sort_key)
    lines = [REPORT_HEADER] + [f"# {n}" for n in notes]
    for rep in ordered:
        for name in _STR_FIELDS:
            value = getattr(rep, name)
            if any(c.isspace() for c in value) or "=" in value:
                raise ValueError(f"{name} {value!r} may not contain whitespace or '='")
        lines.append(" ".join(f"{name}={_fmt(getattr(rep, name))}" for name in _FIELDS))
    path = Path(path)
    try:
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write report {path}: {exc}") from exc
    return path


def parse_report(path) -> List[MetricsReport]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != REPORT_HEADER:
        raise ValueError(f"{path}: not a wavenilm report")
    out = []
    for line in lines[1:]:
        if not line or line.startswith("#"):
            continue
        kv = dict(item.split("=", 1) for item in line.split(" "))
        kwargs = {}
        for name, value in kv.items():
            if name in _STR_FIELDS:
                kwargs[name] = value
            elif name in _INT_FIELDS:
                kwargs[name] = int(value)
            else:
                kwargs[name] = float(value)
        out.append(MetricsReport(**kwargs))
    return out


def write_excerpt(path, truth, predictions: Mapping[str, np.ndarray], aggregate=None,
                  start: int = 0, length: Optional[int] = None) -> int:
    """Prediction-vs-truth excerpt as CSV (columns: index, [aggregate,]
    truth, one per model). Returns the number of data rows."""
    truth = np.asarray(truth, dtype=np.float64)
    stop = len(truth) if length is None else min(len(truth), start + length)
    names = list(predictions)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + (["aggregate"] if aggregate is not None else []) + ["truth"] + names)
        for i in range(start, stop):
            row = [i] + ([_fmt(float(aggregate[i]))] if aggregate is not None else [])
            row += [_fmt(float(truth[i]))] + [_fmt(float(predictions[n][i])) for n in names]
            w.writerow(row)
    return max(0, stop - start)


def write_curve(path, rows: Sequence[Mapping[str, object]], columns: Sequence[str]) -> int:
    """Metric-vs-parameter curve as CSV with the given column order."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])
    return len(rows)
