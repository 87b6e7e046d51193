"""Synthetic households with known per-appliance ground truth.

Each appliance channel is a train of activations drawn from a
:class:`SignatureTemplate`; the aggregate is the sum of all appliance channels
plus a clipped Gaussian background. All channels are whole watts, so the sum
identity holds exactly in floating point.
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .pipeline import (DEFAULT_APPLIANCES, Household, ReadingSeries, binarize, series_checksum,
                       write_csv)

SHAPES = ("rectangular", "two-phase", "multi-cycle")


@dataclass(frozen=True)
class SignatureTemplate:
    """Power signature of one appliance type.

    ``peak_watts`` and ``low_watts`` are (low, high) ranges sampled per
    activation; ``on_duration`` is a (min, max) range in seconds; gaps between
    activations are exponential with mean ``mean_gap`` seconds.
    """

    name: str
    shape: str
    peak_watts: Tuple[float, float]
    on_duration: Tuple[float, float]
    mean_gap: float
    on_power_threshold: float
    low_watts: Tuple[float, float] = (0.0, 0.0)
    heating_fraction: float = 0.2
    cycles: int = 3

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"shape must be one of {SHAPES}, got {self.shape!r}")
        if min(self.peak_watts) <= self.on_power_threshold:
            raise ValueError(f"{self.name}: peak watts must exceed the on-power threshold")
        if min(self.on_duration) <= 0 or self.mean_gap <= 0:
            raise ValueError(f"{self.name}: durations must be positive")
        if self.shape != "rectangular" and min(self.low_watts) < self.on_power_threshold:
            raise ValueError(f"{self.name}: low phase must stay at or above the on-power threshold")

    @property
    def expected_on_fraction(self) -> float:
        d = 0.5 * (self.on_duration[0] + self.on_duration[1])
        return d / (d + self.mean_gap)


PRESET_TEMPLATES: Dict[str, SignatureTemplate] = {
    "kettle": SignatureTemplate("kettle", "rectangular", (2200, 3000), (90, 240), 16000,
                                DEFAULT_APPLIANCES["kettle"].on_power_threshold),
    "microwave": SignatureTemplate("microwave", "rectangular", (900, 1500), (30, 300), 20000,
                                   DEFAULT_APPLIANCES["microwave"].on_power_threshold),
    "washing_machine": SignatureTemplate("washing_machine", "two-phase", (1800, 2300), (2700, 5400), 36000,
                                         DEFAULT_APPLIANCES["washing_machine"].on_power_threshold,
                                         low_watts=(150, 500), heating_fraction=0.2),
    "dishwasher": SignatureTemplate("dishwasher", "multi-cycle", (1900, 2400), (3600, 7200), 60000,
                                    DEFAULT_APPLIANCES["dishwasher"].on_power_threshold,
                                    low_watts=(60, 120), cycles=2),
}


@dataclass
class SyntheticScenario:
    """What to generate. ``schedule`` optionally pins activations per
    template name as ``(start_sample, duration_seconds)`` pairs instead of
    drawing them at random."""

    n_samples: int
    templates: Sequence[SignatureTemplate] = ()
    noise_floor: float = 60.0
    noise_std: float = 20.0
    seed: int = 0
    interval: int = 10
    household: int = 1
    start_time: int = 1_400_000_000
    schedule: Optional[Mapping[str, Sequence[Tuple[int, float]]]] = None


@dataclass
class SyntheticHousehold:
    timestamps: np.ndarray
    aggregate: np.ndarray
    appliances: Dict[str, np.ndarray]
    noise: np.ndarray
    states: Dict[str, np.ndarray]
    household: int = 1

    def to_series(self) -> Dict[str, ReadingSeries]:
        out = {"aggregate": ReadingSeries(self.timestamps, self.aggregate, "aggregate", self.household)}
        for name, w in self.appliances.items():
            out[name] = ReadingSeries(self.timestamps, w, name, self.household)
        return out

    def to_household(self) -> Household:
        channels = {"aggregate": self.aggregate.copy()}
        channels.update({k: v.copy() for k, v in self.appliances.items()})
        return Household(self.household, self.timestamps.copy(), channels)

    def split(self, fraction: float) -> Tuple["SyntheticHousehold", "SyntheticHousehold"]:
        """Split in time at ``fraction`` of the samples."""
        k = int(round(len(self.timestamps) * fraction))

        def part(sl):
            return SyntheticHousehold(self.timestamps[sl], self.aggregate[sl],
                                      {n: w[sl] for n, w in self.appliances.items()}, self.noise[sl],
                                      {n: s[sl] for n, s in self.states.items()}, self.household)
        return part(slice(0, k)), part(slice(k, None))


def activation_profile(template: SignatureTemplate, n: int, rng: np.random.Generator) -> np.ndarray:
    """Whole-watt power draw for an activation lasting ``n`` samples."""
    peak = float(np.round(rng.uniform(*template.peak_watts)))
    if template.shape == "rectangular":
        return np.full(n, peak)
    out = np.empty(n)
    if template.shape == "two-phase":
        k = max(1, int(round(template.heating_fraction * n)))
        out[:k] = peak
        # drum phase: level redrawn every ~minute
        for i in range(k, n, 6):
            out[i:i + 6] = np.round(rng.uniform(*template.low_watts))
        return out
    # multi-cycle: alternate heating bursts and low wash/dry phases
    seg = max(1, n // (2 * template.cycles))
    out[:] = np.round(rng.uniform(*template.low_watts))
    for c in range(template.cycles):
        start = (2 * c + 1) * seg
        out[start:start + seg] = peak
    return out


def _place(channel: np.ndarray, start: int, profile: np.ndarray):
    stop = min(len(channel), start + len(profile))
    if start < stop:
        channel[start:stop] = profile[:stop - start]


def generate(scenario: SyntheticScenario) -> SyntheticHousehold:
    """Deterministic household for ``scenario.seed``."""
    n, dt = int(scenario.n_samples), scenario.interval
    ss = np.random.SeedSequence(scenario.seed)
    noise_seed, *template_seeds = ss.spawn(1 + len(scenario.templates))
    appliances = {}
    states = {}
    for template, seed in zip(scenario.templates, template_seeds):
        rng = np.random.default_rng(seed)
        channel = np.zeros(n)
        if scenario.schedule is not None and template.name in scenario.schedule:
            for start, duration in scenario.schedule[template.name]:
                k = max(1, int(round(duration / dt)))
                _place(channel, int(start), activation_profile(template, k, rng))
        else:
            t = rng.exponential(template.mean_gap) / dt
            while t < n:
                k = max(1, int(round(rng.uniform(*template.on_duration) / dt)))
                _place(channel, int(t), activation_profile(template, k, rng))
                t += k + rng.exponential(template.mean_gap) / dt
        appliances[template.name] = channel
        states[template.name] = binarize(channel, template.on_power_threshold)
    rng = np.random.default_rng(noise_seed)
    if scenario.noise_std > 0 or scenario.noise_floor > 0:
        noise = np.round(np.maximum(0.0, scenario.noise_floor + scenario.noise_std * rng.standard_normal(n)))
    else:
        noise = np.zeros(n)
    aggregate = noise.copy()
    for channel in appliances.values():
        aggregate = aggregate + channel
    timestamps = scenario.start_time + dt * np.arange(n, dtype=np.int64)
    return SyntheticHousehold(timestamps, aggregate, appliances, noise, states, scenario.household)


def two_appliance_scenario(n_samples: int = 200_000, seed: int = 0) -> SyntheticScenario:
    """Kettle-like plus washer-like household."""
    return SyntheticScenario(n_samples, [PRESET_TEMPLATES["kettle"], PRESET_TEMPLATES["washing_machine"]],
                             seed=seed)


def make_fixture_csv(scenario, path, dropouts: Sequence[Tuple[int, int]] = ()) -> str:
    """Write a generated household in the ingest CSV schema.

    ``dropouts`` are ``(offset_seconds, duration_seconds)`` windows whose rows
    are omitted, emulating meter outages. Returns the checksum of the written
    series.
    """
    hh = scenario if isinstance(scenario, SyntheticHousehold) else generate(scenario)
    keep = np.ones(len(hh.timestamps), dtype=bool)
    rel = hh.timestamps - hh.timestamps[0] if len(hh.timestamps) else hh.timestamps
    for offset, duration in dropouts:
        keep &= ~((rel >= offset) & (rel < offset + duration))
    channels = {"aggregate": hh.aggregate[keep]}
    channels.update({k: v[keep] for k, v in hh.appliances.items()})
    write_csv(path, hh.timestamps[keep], channels)
    return series_checksum({k: ReadingSeries(hh.timestamps[keep], v, k) for k, v in channels.items()})


# ---------------------------------------------------------------------------
# scenario files


def _range(text: str) -> Tuple[float, float]:
    parts = [float(x) for x in text.replace(",", " ").split()]
    if len(parts) == 1:
        return parts[0], parts[0]
    if len(parts) != 2:
        raise ValueError(f"expected 'low, high', got {text!r}")
    return parts[0], parts[1]


def scenario_from_config(cp: configparser.ConfigParser) -> SyntheticScenario:
    sec = cp["scenario"] if cp.has_section("scenario") else {}
    names = [x.strip() for x in sec.get("templates", "kettle, washing_machine").split(",") if x.strip()]
    templates = []
    for name in names:
        base = PRESET_TEMPLATES.get(name)
        tsec = cp[f"template:{name}"] if cp.has_section(f"template:{name}") else {}
        if base is None and not tsec:
            raise ValueError(f"unknown template {name!r}; define a [template:{name}] section")
        kwargs = dataclasses.asdict(base) if base is not None else {"name": name}
        for key, value in tsec.items():
            if key in ("peak_watts", "on_duration", "low_watts"):
                kwargs[key] = _range(value)
            elif key in ("mean_gap", "on_power_threshold", "heating_fraction"):
                kwargs[key] = float(value)
            elif key == "cycles":
                kwargs[key] = int(value)
            elif key == "shape":
                kwargs[key] = value.strip()
            else:
                raise ValueError(f"unknown template key {key!r} in [template:{name}]")
        templates.append(SignatureTemplate(**kwargs))
    return SyntheticScenario(
        n_samples=int(sec.get("n_samples", 200_000)),
        templates=templates,
        noise_floor=float(sec.get("noise_floor", 60.0)),
        noise_std=float(sec.get("noise_std", 20.0)),
        seed=int(sec.get("seed", 0)),
        interval=int(sec.get("interval", 10)),
        household=int(sec.get("household", 1)),
        start_time=int(sec.get("start_time", 1_400_000_000)),
    )


def load_scenario(path) -> SyntheticScenario:
    cp = configparser.ConfigParser()
    cp.read_string(Path(path).read_text(encoding="utf-8"))
    return scenario_from_config(cp)
