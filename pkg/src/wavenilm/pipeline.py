"""Meter data preprocessing: resampling, gap filling, normalisation and the
fast sequence-to-point window slicer."""
from __future__ import annotations

import configparser
import csv
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .serialization import DATASET_MAGIC, read_container, write_container

logger = logging.getLogger(__name__)

RESAMPLE_INTERVAL = 10
SHORT_GAP_SECONDS = 180


class IngestError(ValueError):
    """Raised for structurally invalid meter files."""


@dataclass
class ReadingSeries:
    """Timestamped power readings of one channel of one household.

    ``watts`` may contain NaN, which marks a missing grid point between
    :func:`resample` and :func:`fill_gaps`.
    """

    timestamps: np.ndarray
    watts: np.ndarray
    channel: str = "aggregate"
    household: int = 0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        self.watts = np.asarray(self.watts, dtype=np.float64)
        if self.timestamps.ndim != 1 or self.timestamps.shape != self.watts.shape:
            raise ValueError(
                f"timestamps {self.timestamps.shape} and watts {self.watts.shape} must be 1-D and equal length"
            )
        if len(self.timestamps) > 1 and np.any(np.diff(self.timestamps) <= 0):
            bad = int(np.argmax(np.diff(self.timestamps) <= 0)) + 1
            raise ValueError(f"timestamps must be strictly increasing (violated at index {bad})")
        if np.any(self.watts < 0):
            raise ValueError(f"{self.channel}: watts must be non-negative")

    def __len__(self):
        return len(self.timestamps)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.watts)

    def with_watts(self, watts) -> "ReadingSeries":
        return ReadingSeries(self.timestamps, watts, self.channel, self.household)


def resample(series: ReadingSeries, interval: int = RESAMPLE_INTERVAL) -> ReadingSeries:
    """Put readings on a uniform ``interval``-second grid from the first to the
    last timestamp.

    Each grid point takes the latest raw reading at or before it, provided that
    reading is less than ``interval`` seconds old; otherwise the point is
    marked missing (NaN) for :func:`fill_gaps`.
    """
    if interval <= 0:
        raise ValueError("interval must be positive")
    if len(series) == 0:
        return series.with_watts(np.zeros(0))
    ts = series.timestamps
    grid = np.arange(ts[0], ts[-1] + 1, interval, dtype=np.int64)
    idx = np.searchsorted(ts, grid, side="right") - 1
    values = series.watts[idx].copy()
    values[(grid - ts[idx]) >= interval] = np.nan
    return ReadingSeries(grid, values, series.channel, series.household)


def _missing_runs(missing: np.ndarray):
    """(start, stop) index pairs of consecutive True runs."""
    if not missing.any():
        return []
    padded = np.concatenate([[False], missing, [False]])
    edges = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(edges[0::2], edges[1::2]))


def fill_gaps(series: ReadingSeries, max_forward_fill: int = SHORT_GAP_SECONDS) -> ReadingSeries:
    """Fill missing grid points.

    Runs lasting less than ``max_forward_fill`` seconds repeat the last
    observed value; longer runs (and any run at the very start) become zeros.
    A run of ``n`` points on an ``interval`` grid lasts ``n * interval`` seconds.
    """
    watts = series.watts.copy()
    runs = _missing_runs(np.isnan(watts))
    if not runs:
        return series.with_watts(watts)
    steps = np.diff(series.timestamps)
    if len(steps) and np.any(steps != steps[0]):
        raise ValueError("fill_gaps expects a uniform grid; call resample() first")
    interval = int(steps[0]) if len(steps) else RESAMPLE_INTERVAL
    for start, stop in runs:
        duration = (stop - start) * interval
        if start > 0 and duration < max_forward_fill:
            watts[start:stop] = watts[start - 1]
        else:
            watts[start:stop] = 0.0
    return series.with_watts(watts)


def preprocess(series: ReadingSeries, interval: int = RESAMPLE_INTERVAL) -> ReadingSeries:
    return fill_gaps(resample(series, interval))


# ---------------------------------------------------------------------------
# normalisation


@dataclass(frozen=True)
class NormalizationStats:
    mean: float
    std: float
    channel: str = "aggregate"

    def __post_init__(self):
        if not (self.std > 0 and math.isfinite(self.std)):
            raise ValueError(f"{self.channel}: standard deviation must be positive, got {self.std}")

    def normalize(self, watts):
        return (np.asarray(watts, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, values):
        return np.asarray(values, dtype=np.float64) * self.std + self.mean

    def to_dict(self, prefix: str = "") -> Dict[str, str]:
        return {f"{prefix}channel": self.channel, f"{prefix}mean": repr(float(self.mean)),
                f"{prefix}std": repr(float(self.std))}

    @classmethod
    def from_dict(cls, d: Mapping[str, str], prefix: str = "") -> "NormalizationStats":
        return cls(float(d[f"{prefix}mean"]), float(d[f"{prefix}std"]), d[f"{prefix}channel"])


def compute_norm_stats(training_data: Iterable, channel: str = "aggregate") -> NormalizationStats:
    """Population mean and std over the concatenation of all training series."""
    chunks = [s.watts if isinstance(s, ReadingSeries) else np.asarray(s, dtype=np.float64)
              for s in training_data]
    if not chunks or sum(len(c) for c in chunks) == 0:
        raise ValueError(f"{channel}: no training data for normalisation statistics")
    values = np.concatenate(chunks)
    if np.isnan(values).any():
        raise ValueError(f"{channel}: training data still contains missing values")
    mean = float(values.mean())
    std = float(values.std())
    if std == 0.0:
        raise ValueError(f"{channel}: channel is constant, cannot normalise")
    return NormalizationStats(mean, std, channel)


# ---------------------------------------------------------------------------
# windows


@dataclass
class WindowedDataset:
    """Aligned (input window, target window) pairs.

    ``starts[k]`` is the offset of window ``k`` in its household's series; its
    targets cover indices ``starts[k] + L//2`` to ``starts[k] + L//2 + r - 1``.
    """

    inputs: np.ndarray
    targets: np.ndarray
    starts: np.ndarray
    households: np.ndarray
    receptive_field: int
    target_field: int

    def __post_init__(self):
        W = self.receptive_field + self.target_field - 1
        self.inputs = np.asarray(self.inputs).reshape(-1, W)
        self.targets = np.asarray(self.targets).reshape(-1, self.target_field)
        self.starts = np.asarray(self.starts, dtype=np.int64).reshape(-1)
        self.households = np.asarray(self.households, dtype=np.int64).reshape(-1)
        n = len(self.inputs)
        if not (len(self.targets) == len(self.starts) == len(self.households) == n):
            raise ValueError("inputs, targets, starts and households must have equal length")

    def __len__(self):
        return len(self.inputs)

    @property
    def window_length(self) -> int:
        return self.receptive_field + self.target_field - 1

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(self.inputs[index], self.targets[index], self.starts[index],
                               self.households[index], self.receptive_field, self.target_field)

    @classmethod
    def concatenate(cls, parts: Sequence["WindowedDataset"]) -> "WindowedDataset":
        """Merge per-household datasets, ordered by (household, start)."""
        if not parts:
            raise ValueError("nothing to concatenate")
        L, r = parts[0].receptive_field, parts[0].target_field
        if any((p.receptive_field, p.target_field) != (L, r) for p in parts):
            raise ValueError("cannot concatenate datasets with different (L, r)")
        merged = cls(np.concatenate([p.inputs for p in parts]), np.concatenate([p.targets for p in parts]),
                     np.concatenate([p.starts for p in parts]), np.concatenate([p.households for p in parts]),
                     L, r)
        order = np.lexsort((merged.starts, merged.households))
        return merged.subset(order)

    def save(self, path):
        write_container(path, DATASET_MAGIC,
                        {"receptive_field": str(self.receptive_field), "target_field": str(self.target_field)},
                        {"inputs": self.inputs, "targets": self.targets,
                         "starts": self.starts, "households": self.households})

    @classmethod
    def load(cls, path) -> "WindowedDataset":
        meta, arrays = read_container(path, DATASET_MAGIC)
        return cls(arrays["inputs"], arrays["targets"], arrays["starts"], arrays["households"],
                   int(meta["receptive_field"]), int(meta["target_field"]))


def window_count(T: int, L: int, r: int) -> int:
    W = L + r - 1
    return 0 if T < W else (T - W) // r + 1


def slice_windows(aggregate, appliance, L: int, r: int, household: int = 0) -> WindowedDataset:
    """Cut inputs of length ``L + r - 1`` with stride ``r`` and the
    centre-aligned length-``r`` appliance targets."""
    agg = aggregate.watts if isinstance(aggregate, ReadingSeries) else np.asarray(aggregate, dtype=np.float64)
    app = appliance.watts if isinstance(appliance, ReadingSeries) else np.asarray(appliance)
    if agg.shape != app.shape or agg.ndim != 1:
        raise ValueError(f"aggregate {agg.shape} and appliance {app.shape} must be aligned 1-D series")
    if L < 1 or r < 1:
        raise ValueError("L and r must be positive")
    W = L + r - 1
    n = window_count(len(agg), L, r)
    if n == 0:
        warnings.warn(f"series of length {len(agg)} is shorter than one window (L + r - 1 = {W})",
                      stacklevel=2)
        return WindowedDataset(np.zeros((0, W)), np.zeros((0, r), dtype=app.dtype), [], [], L, r)
    starts = np.arange(n, dtype=np.int64) * r
    inputs = sliding_window_view(agg, W)[starts]
    targets = sliding_window_view(app, r)[starts + L // 2]
    return WindowedDataset(inputs.copy(), targets.copy(), starts, np.full(n, household), L, r)


def _per_household(values, households) -> Dict[int, np.ndarray]:
    if isinstance(values, Mapping):
        return {int(k): np.asarray(v.watts if isinstance(v, ReadingSeries) else v, dtype=np.float64)
                for k, v in values.items()}
    arr = np.asarray(values.watts if isinstance(values, ReadingSeries) else values, dtype=np.float64)
    return {int(h): arr for h in np.unique(households)}


def filter_invalid(dataset: WindowedDataset, raw_aggregate, raw_appliance) -> WindowedDataset:
    """Drop windows whose target field contains an appliance reading above the
    aligned aggregate reading.

    The raw series may be single arrays (one household) or mappings from
    household ID to array.
    """
    if len(dataset) == 0:
        return dataset
    aggs = _per_household(raw_aggregate, dataset.households)
    apps = _per_household(raw_appliance, dataset.households)
    idx = dataset.starts[:, None] + dataset.receptive_field // 2 + np.arange(dataset.target_field)
    keep = np.ones(len(dataset), dtype=bool)
    for h in np.unique(dataset.households):
        rows = dataset.households == h
        bad = apps[int(h)][idx[rows]] > aggs[int(h)][idx[rows]]
        keep[rows] = ~bad.any(axis=1)
    return dataset.subset(keep)


def evaluation_mask(raw_aggregate, raw_appliance) -> np.ndarray:
    """Points usable for metrics: aggregate present, non-zero and not below
    the appliance reading."""
    agg = np.asarray(raw_aggregate, dtype=np.float64)
    app = np.asarray(raw_appliance, dtype=np.float64)
    return (agg >= app) & (agg != 0)


def binarize(watts, threshold: float) -> np.ndarray:
    """On/off states: 1 where watts >= threshold."""
    if not threshold > 0:
        raise ValueError("on-power threshold must be positive")
    w = watts.watts if isinstance(watts, ReadingSeries) else np.asarray(watts, dtype=np.float64)
    return (w >= threshold).astype(np.int8)


# ---------------------------------------------------------------------------
# appliance specs


@dataclass(frozen=True)
class ApplianceSpec:
    name: str
    on_power_threshold: float
    train_households: tuple = ()
    test_households: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "train_households", tuple(int(h) for h in self.train_households))
        object.__setattr__(self, "test_households", tuple(int(h) for h in self.test_households))
        if not self.on_power_threshold > 0:
            raise ValueError(f"{self.name}: on-power threshold must be positive")
        overlap = set(self.train_households) & set(self.test_households)
        if overlap:
            raise ValueError(f"{self.name}: households {sorted(overlap)} are in both train and test splits")


def _parse_ids(text: str) -> tuple:
    return tuple(int(x) for x in text.replace(",", " ").split())


def parse_appliance_specs(text: str) -> Dict[str, ApplianceSpec]:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    specs = {}
    for name in cp.sections():
        sec = cp[name]
        specs[name] = ApplianceSpec(name, float(sec["on_power_threshold"]),
                                    _parse_ids(sec.get("train_households", "")),
                                    _parse_ids(sec.get("test_households", "")))
    return specs


def load_appliance_specs(path=None) -> Dict[str, ApplianceSpec]:
    """Read an appliance spec file; without a path, the packaged defaults."""
    if path is None:
        text = resources.files("wavenilm").joinpath("appliances.ini").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return parse_appliance_specs(text)


def write_appliance_specs(specs: Mapping[str, ApplianceSpec], path):
    lines = []
    for spec in specs.values():
        lines += [f"[{spec.name}]",
                  f"on_power_threshold = {spec.on_power_threshold:g}",
                  "train_households = " + ", ".join(map(str, spec.train_households)),
                  "test_households = " + ", ".join(map(str, spec.test_households)), ""]
    Path(path).write_text("\n".join(lines), encoding="utf-8")


DEFAULT_APPLIANCES = load_appliance_specs()


# ---------------------------------------------------------------------------
# CSV


@dataclass
class IngestResult:
    series: Dict[str, ReadingSeries]
    malformed_rows: List[int] = field(default_factory=list)

    def __getitem__(self, key):
        return self.series[key]

    def __len__(self):
        return len(self.series)


def ingest_csv(path, household: int = 0, appliances: Optional[Iterable[str]] = None,
               column_map: Optional[Mapping[str, str]] = None) -> IngestResult:
    """Parse a ``timestamp,aggregate,<appliance>...`` meter file.

    ``column_map`` renames source columns (e.g. a REFIT ``Appliance1`` column
    to ``kettle``) before validation. When ``appliances`` is given, any other
    appliance column is an error. Rows with the wrong field count or
    unparsable/negative values are skipped and reported by line number;
    a timestamp that does not increase is a hard error.
    """
    column_map = dict(column_map or {})
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [column_map.get(c.strip(), c.strip()) for c in next(reader)]
        except StopIteration:
            raise IngestError(f"{path}: empty file") from None
        if not header or header[0] != "timestamp":
            raise IngestError(f"{path}: first column must be 'timestamp', got {header[:1]}")
        if "aggregate" not in header:
            raise IngestError(f"{path}: missing 'aggregate' column")
        if len(set(header)) != len(header):
            raise IngestError(f"{path}: duplicate column names in header {header}")
        if appliances is not None:
            known = set(appliances) | {"timestamp", "aggregate"}
            unknown = [c for c in header if c not in known]
            if unknown:
                raise IngestError(f"{path}: unknown column(s) {unknown}")
        ncol = len(header)
        ts: List[int] = []
        cols: List[List[float]] = [[] for _ in range(ncol - 1)]
        malformed = []
        last = None
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                malformed.append(line_no)
                continue
            try:
                t = int(row[0])
                vals = [float(v) for v in row[1:]]
            except ValueError:
                malformed.append(line_no)
                continue
            if any(not math.isfinite(v) or v < 0 for v in vals):
                malformed.append(line_no)
                continue
            if last is not None and t <= last:
                raise IngestError(f"{path}: row {line_no}: timestamp {t} is not after previous timestamp {last}")
            last = t
            ts.append(t)
            for c, v in zip(cols, vals):
                c.append(v)
    if malformed:
        logger.warning("%s: skipped %d malformed row(s), first at row %d", path, len(malformed), malformed[0])
    t_arr = np.asarray(ts, dtype=np.int64)
    series = {name: ReadingSeries(t_arr, np.asarray(c, dtype=np.float64), name, household)
              for name, c in zip(header[1:], cols)}
    return IngestResult(series, malformed)


def _format_watts(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def write_csv(path, timestamps, channels: Mapping[str, np.ndarray]):
    """Write channels in the ingest schema; values round-trip exactly."""
    if "aggregate" not in channels:
        raise ValueError("channels must include 'aggregate'")
    names = ["aggregate"] + [k for k in channels if k != "aggregate"]
    arrays = [np.asarray(channels[k], dtype=np.float64) for k in names]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(["timestamp"] + names) + "\n")
        for i, t in enumerate(np.asarray(timestamps, dtype=np.int64)):
            fh.write(",".join([str(int(t))] + [_format_watts(a[i]) for a in arrays]) + "\n")


def series_checksum(series: Mapping[str, ReadingSeries]) -> str:
    """SHA-256 over channel names, timestamps and values (order-independent
    of dict insertion)."""
    h = hashlib.sha256()
    for name in sorted(series):
        s = series[name]
        h.update(name.encode())
        h.update(np.ascontiguousarray(s.timestamps, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(s.watts, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# households and datasets


@dataclass
class Household:
    """Preprocessed, grid-aligned channels of one house."""

    household: int
    timestamps: np.ndarray
    channels: Dict[str, np.ndarray]

    @property
    def aggregate(self) -> np.ndarray:
        return self.channels["aggregate"]

    def __len__(self):
        return len(self.timestamps)


def prepare_household(series: Mapping[str, ReadingSeries], household: Optional[int] = None,
                      interval: int = RESAMPLE_INTERVAL) -> Household:
    """Resample and gap-fill every channel onto one shared grid."""
    if isinstance(series, IngestResult):
        series = series.series
    if "aggregate" not in series:
        raise ValueError("household needs an 'aggregate' channel")
    done = {name: preprocess(s, interval) for name, s in series.items()}
    grid = done["aggregate"].timestamps
    for name, s in done.items():
        if not np.array_equal(s.timestamps, grid):
            raise ValueError(f"channel {name!r} does not share the aggregate's time grid")
    hid = household if household is not None else series["aggregate"].household
    return Household(int(hid), grid, {name: s.watts for name, s in done.items()})


def make_dataset(households: Sequence[Household], appliance: str, L: int, r: int,
                 aggregate_stats: NormalizationStats,
                 appliance_stats: Optional[NormalizationStats] = None,
                 threshold: Optional[float] = None, drop_invalid: bool = True) -> WindowedDataset:
    """Windows over several households with normalised inputs.

    Targets are normalised appliance watts when ``appliance_stats`` is given,
    otherwise on/off states at ``threshold``.
    """
    if appliance_stats is None and threshold is None:
        raise ValueError("need appliance_stats (regression) or threshold (classification)")
    parts = []
    for hh in households:
        if appliance not in hh.channels:
            raise ValueError(f"household {hh.household} has no {appliance!r} channel")
        agg, app = hh.aggregate, hh.channels[appliance]
        ds = slice_windows(agg, app, L, r, hh.household)
        if drop_invalid:
            ds = filter_invalid(ds, agg, app)
        targets = appliance_stats.normalize(ds.targets) if appliance_stats is not None else binarize(ds.targets, threshold)
        parts.append(WindowedDataset(aggregate_stats.normalize(ds.inputs), targets, ds.starts,
                                     ds.households, L, r))
    return WindowedDataset.concatenate(parts)
