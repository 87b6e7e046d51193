"""Command-line entry point.

Every subcommand reads an INI configuration (``--config``), applies
``--section.key=value`` overrides and shortcut flags on top, writes a JSON run
manifest into the output directory and then does the work. ``replay`` re-runs
a command from its manifest.

Exit codes: 0 success, 1 computation failure, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import configparser
import copy
import hashlib
import json
import logging
import os
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .evaluation import (MetricsReport, baseline_always_mean, baseline_always_zero, emit_report, evaluate,
                         write_curve, write_excerpt)
from .models import (CNN_RNN_MAX_RECEPTIVE_FIELD, RECEPTIVE_FIELD_PRESETS, TARGET_FIELD_PRESETS, ModelConfig,
                     TrainedModel, build_model)
from .pipeline import (DEFAULT_APPLIANCES, Household, IngestError, compute_norm_stats, ingest_csv,
                       load_appliance_specs, make_dataset, prepare_household, write_csv)
from .serialization import FormatError, to_bytes
from .synth import SyntheticScenario, PRESET_TEMPLATES, generate, load_scenario, make_fixture_csv
from .training import (DEFAULT_CUTOFF, NO_PREDICTION, TrainConfig, TrainingDiverged, detect_onoff_classifier,
                       detect_onoff_regression, predict_series, train)

logger = logging.getLogger("wavenilm")

CONFIG_DIR_ENV = "WAVENILM_CONFIG_DIR"
MANIFEST_NAME = "manifest.json"
SNAPSHOT_MAGIC = b"WNILMSNP"
COMMANDS = ("synth", "ingest", "train", "predict", "detect", "evaluate", "sweep")

DEFAULTS: Dict[str, Dict[str, str]] = {
    "data": {"train": "", "test": "", "appliance": "kettle", "threshold": "", "appliances_file": ""},
    "input": {"model": "", "series": "", "columns": ""},
    "model": {"family": "wavenet", "layers": "6", "receptive_field": "", "target_field": "10",
              "residual_channels": "32", "skip_channels": "64", "hidden_size": "64", "dtype": "float32",
              "seed": "0"},
    "train": {"framework": "regression", "batch_size": "128", "lr": "0.001", "max_iterations": "1000",
              "eval_every": "100", "patience": "10", "validation_fraction": "0.1", "seed": "0"},
    "detect": {"framework": "", "cutoff": repr(DEFAULT_CUTOFF), "threshold": ""},
    "evaluate": {"notes": "", "excerpt_length": "1000"},
    "synth": {"scenario": "", "templates": "kettle, washing_machine", "n_samples": "200000", "seed": "0",
              "noise_floor": "60", "noise_std": "20", "test_fraction": "0.2", "household": "1"},
    "sweep": {"families": "wavenet, cnn, rnn", "receptive_fields": "", "target_fields": "1, 10, 100, 1000",
              "fixed_receptive_field": "127", "fixed_target_field": "10", "max_iterations": "200",
              "eval_every": "0"},
    "output": {"dir": "."},
}

SHORTCUTS = {
    "family": ("model", "family"),
    "layers": ("model", "layers"),
    "receptive_field": ("model", "receptive_field"),
    "target_field": ("model", "target_field"),
    "framework": ("train", "framework"),
    "cutoff": ("detect", "cutoff"),
    "threshold": ("detect", "threshold"),
    "seed": ("train", "seed"),
    "iterations": ("train", "max_iterations"),
    "out": ("output", "dir"),
    "appliance": ("data", "appliance"),
}


class UsageError(Exception):
    """Bad invocation or input; exit code 2."""


# ---------------------------------------------------------------------------
# configuration


def _resolve_config_path(name: Optional[str], command: str) -> Optional[Path]:
    env_dir = os.environ.get(CONFIG_DIR_ENV)
    if name:
        p = Path(name)
        if p.exists():
            return p
        if env_dir and (Path(env_dir) / name).exists():
            return Path(env_dir) / name
        raise UsageError(f"config file not found: {name}")
    if env_dir and (Path(env_dir) / f"{command}.ini").exists():
        return Path(env_dir) / f"{command}.ini"
    return None


PAIR = ("layers", "receptive_field")


def _set(cfg, section, key, value):
    if section not in cfg or key not in cfg[section]:
        raise UsageError(f"unknown configuration key {section}.{key}")
    cfg[section][key] = str(value)


def apply_layer(cfg, assignments):
    """Apply one configuration layer (file or flags).

    ``layers`` and ``receptive_field`` are two spellings of one quantity; a
    layer that sets only one of them clears the other inherited from below,
    while a layer that sets both has them checked for consistency later.
    """
    touched = {k for s, k, _ in assignments if s == "model" and k in PAIR}
    for section, key, value in assignments:
        _set(cfg, section, key, value)
    if len(touched) == 1:
        other = PAIR[1] if PAIR[0] in touched else PAIR[0]
        cfg["model"][other] = ""


def load_config(path: Optional[Path]) -> Dict[str, Dict[str, str]]:
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(Path(path).read_text(encoding="utf-8"))
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from exc
    apply_layer(cfg, [(sec, key, value) for sec in cp.sections() for key, value in cp[sec].items()])
    return cfg


def parse_overrides(extra: Sequence[str]) -> List[tuple]:
    """``--section.key=value`` or ``--section.key value`` pairs."""
    out = []
    i = 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg.split("=", 1)[0]:
            raise UsageError(f"unrecognised argument {arg!r}")
        name, eq, value = arg[2:].partition("=")
        if not eq:
            if i + 1 >= len(extra):
                raise UsageError(f"{arg} needs a value")
            value = extra[i + 1]
            i += 1
        section, _, key = name.partition(".")
        out.append((section, key.replace("-", "_"), value))
        i += 1
    return out


def _opt(cfg, section, key, cast=str):
    v = cfg[section][key].strip()
    return cast(v) if v else None


def _list(text: str, cast=str):
    return [cast(x) for x in text.replace(",", " ").split()]


def model_config(cfg, head: str) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        family=m["family"].strip(), layers=_opt(cfg, "model", "layers", int),
        receptive_field=_opt(cfg, "model", "receptive_field", int), target_field=int(m["target_field"]),
        residual_channels=int(m["residual_channels"]), skip_channels=int(m["skip_channels"]),
        hidden_size=int(m["hidden_size"]), head=head, seed=int(m["seed"]), dtype=m["dtype"].strip())


def train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(framework=t["framework"].strip(), batch_size=int(t["batch_size"]), lr=float(t["lr"]),
                       max_iterations=int(t["max_iterations"]), eval_every=int(t["eval_every"]),
                       patience=int(t["patience"]), validation_fraction=float(t["validation_fraction"]),
                       seed=int(t["seed"]))


def _threshold(cfg) -> float:
    explicit = _opt(cfg, "data", "threshold", float)
    if explicit is not None:
        return explicit
    specs = DEFAULT_APPLIANCES
    if cfg["data"]["appliances_file"].strip():
        specs = load_appliance_specs(_existing(cfg["data"]["appliances_file"].strip(), "appliance spec file"))
    name = cfg["data"]["appliance"].strip()
    if name not in specs:
        raise UsageError(f"no on-power threshold for appliance {name!r}; set data.threshold")
    return specs[name].on_power_threshold


# ---------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not path or not p.exists():
        raise UsageError(f"{what} not found: {path or '(not set)'}")
    return p


def write_manifest(out_dir: Path, command: str, cfg, inputs: Dict[str, Path], seed: int,
                   outputs: Dict[str, Path]) -> Path:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": cfg,
        "inputs": {str(p): sha256_file(p) for p in inputs.values()},
        "input_roles": {role: str(p) for role, p in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
    }
    path = out_dir / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _out_dir(cfg) -> Path:
    d = Path(cfg["output"]["dir"].strip() or ".")
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# data helpers


def _load_household(path: Path, household: int, columns: str = "") -> Household:
    column_map = dict(item.split(":", 1) for item in _list(columns)) if columns.strip() else None
    result = ingest_csv(path, household=household, column_map=column_map)
    if result.malformed_rows:
        logger.warning("%s: %d malformed row(s) skipped", path, len(result.malformed_rows))
    if len(result.series["aggregate"]) == 0:
        raise UsageError(f"{path}: no readings")
    return prepare_household(result, household)


def _train_paths(cfg) -> List[Path]:
    paths = _list(cfg["data"]["train"])
    if not paths:
        raise UsageError("dataset not found: data.train is not set")
    return [_existing(p, "dataset") for p in paths]


def _write_states(path: Path, timestamps, values, fmt):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("timestamp,value\n")
        for t, v in zip(timestamps, values):
            fh.write(f"{int(t)},{fmt(v)}\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg, replaying=False) -> int:
    s = cfg["synth"]
    out = _out_dir(cfg)
    inputs = {}
    if s["scenario"].strip():
        inputs["scenario"] = _existing(s["scenario"].strip(), "scenario file")
        scenario = load_scenario(inputs["scenario"])
    else:
        names = _list(s["templates"])
        unknown = [n for n in names if n not in PRESET_TEMPLATES]
        if unknown:
            raise UsageError(f"unknown template(s) {unknown}; use a scenario file to define new ones")
        scenario = SyntheticScenario(int(s["n_samples"]), [PRESET_TEMPLATES[n] for n in names],
                                     float(s["noise_floor"]), float(s["noise_std"]), int(s["seed"]),
                                     household=int(s["household"]))
    frac = float(s["test_fraction"])
    if not 0 <= frac < 1:
        raise UsageError("synth.test_fraction must be in [0, 1)")
    outputs = {"train": out / "train.csv"}
    if frac > 0:
        outputs["test"] = out / "test.csv"
    write_manifest(out, "synth", cfg, inputs, scenario.seed, outputs)
    hh = generate(scenario)
    tr, te = hh.split(1 - frac)
    print(f"train.csv sha256-series {make_fixture_csv(tr, outputs['train'])}")
    if frac > 0:
        print(f"test.csv sha256-series {make_fixture_csv(te, outputs['test'])}")
    return 0


def cmd_ingest(cfg, replaying=False) -> int:
    out = _out_dir(cfg)
    src = _existing(cfg["input"]["series"].strip(), "series file")
    outputs = {"series": out / "clean.csv"}
    write_manifest(out, "ingest", cfg, {"series": src}, 0, outputs)
    hh = _load_household(src, 0, cfg["input"]["columns"])
    write_csv(outputs["series"], hh.timestamps, hh.channels)
    print(f"{len(hh)} samples on a 10 s grid -> {outputs['series']}")
    return 0


def _write_snapshot(path: Path, snap: Dict):
    arrays = {f"param.{k}": v for k, v in snap["params"].items()}
    arrays["batch"] = np.asarray(snap["batch"], dtype=np.int64)
    path.write_bytes(to_bytes(SNAPSHOT_MAGIC, {"iteration": str(snap["iteration"]),
                                               "adam_step": str(snap["adam_step"])}, arrays))


def cmd_train(cfg, replaying=False) -> int:
    tc = train_config(cfg)
    mc = model_config(cfg, tc.framework)
    cfg["model"]["layers"], cfg["model"]["receptive_field"] = str(mc.layers or ""), str(mc.receptive_field)
    appliance = cfg["data"]["appliance"].strip()
    threshold = _threshold(cfg)
    paths = _train_paths(cfg)
    out = _out_dir(cfg)
    outputs = {"model": out / "model.wnm", "log": out / "train.log", "snapshot": out / "diverged.snap"}
    write_manifest(out, "train", cfg, {f"train{i}": p for i, p in enumerate(paths)}, tc.seed, outputs)
    households = [_load_household(p, i + 1, cfg["input"]["columns"]) for i, p in enumerate(paths)]
    for hh in households:
        if appliance not in hh.channels:
            raise UsageError(f"household file has no {appliance!r} column")
    agg_stats = compute_norm_stats([hh.aggregate for hh in households], "aggregate")
    app_stats = compute_norm_stats([hh.channels[appliance] for hh in households], appliance) \
        if tc.framework == "regression" else None
    ds = make_dataset(households, appliance, mc.receptive_field, mc.target_field, agg_stats, app_stats,
                      threshold=threshold)
    if len(ds) == 0:
        raise UsageError("training data yields no valid window for this (L, r)")
    network = build_model(mc)
    logger.info("training %s L=%d r=%d on %d windows", mc.family, mc.receptive_field, mc.target_field, len(ds))
    try:
        run = train(network, ds, tc)
    except TrainingDiverged as exc:
        _write_snapshot(outputs["snapshot"], exc.snapshot)
        print(f"error: {exc}; snapshot written to {outputs['snapshot']}", file=sys.stderr)
        return 1
    TrainedModel(network, agg_stats, app_stats, appliance, threshold).save(outputs["model"])
    outputs["log"].write_text(run.log_text(timing=True), encoding="utf-8")
    print(f"model -> {outputs['model']} ({len(run.log)} iterations, best {run.best_metric:.6g} "
          f"at {run.best_iteration}, {run.ms_per_iteration:.1f} ms/iter)")
    return 0


def _load_inputs(cfg):
    model_path = _existing(cfg["input"]["model"].strip(), "model file")
    series_path = _existing(cfg["input"]["series"].strip(), "series file")
    try:
        model = TrainedModel.load(model_path)
    except FormatError as exc:
        raise UsageError(f"{model_path}: {exc}") from exc
    return model_path, series_path, model


def cmd_predict(cfg, replaying=False) -> int:
    model_path, series_path, model = _load_inputs(cfg)
    out = _out_dir(cfg)
    outputs = {"predictions": out / "predictions.csv"}
    write_manifest(out, "predict", cfg, {"model": model_path, "series": series_path}, model.config.seed, outputs)
    hh = _load_household(series_path, 0, cfg["input"]["columns"])
    pred = predict_series(model, hh.aggregate)
    ok = ~np.isnan(pred)
    _write_states(outputs["predictions"], hh.timestamps[ok], pred[ok], repr)
    print(f"{int(ok.sum())} predictions -> {outputs['predictions']}")
    return 0


def cmd_detect(cfg, replaying=False) -> int:
    model_path, series_path, model = _load_inputs(cfg)
    framework = cfg["detect"]["framework"].strip() or model.config.head
    if framework not in ("regression", "classification"):
        raise UsageError(f"detect.framework must be regression or classification, got {framework!r}")
    if framework != model.config.head:
        raise UsageError(f"model has a {model.config.head} head but --framework {framework} was requested")
    cutoff = float(cfg["detect"]["cutoff"])
    threshold = _opt(cfg, "detect", "threshold", float)
    if threshold is None:
        threshold = model.threshold
    cfg["detect"]["framework"] = framework
    cfg["detect"]["threshold"] = "" if threshold is None else repr(float(threshold))
    out = _out_dir(cfg)
    outputs = {"states": out / "states.csv", "report": out / "detect_report.txt"}
    write_manifest(out, "detect", cfg, {"model": model_path, "series": series_path}, model.config.seed, outputs)
    hh = _load_household(series_path, 0, cfg["input"]["columns"])
    if framework == "classification":
        states = detect_onoff_classifier(model, hh.aggregate, cutoff)
    else:
        if threshold is None:
            raise UsageError("regression detection needs --threshold")
        states = detect_onoff_regression(model, hh.aggregate, threshold)
    ok = states != NO_PREDICTION
    _write_states(outputs["states"], hh.timestamps[ok], states[ok], lambda v: str(int(v)))
    print(f"{int(ok.sum())} states -> {outputs['states']}")
    if model.appliance in hh.channels and threshold is not None:
        rep = evaluate(None, hh.channels[model.appliance], hh.aggregate, model.appliance,
                       f"{model.config.family}-{framework}", threshold=threshold, pred_states=states,
                       receptive_field=model.config.receptive_field, target_field=model.config.target_field)
        emit_report([rep], outputs["report"], notes=[f"framework={framework} cutoff={cutoff!r}"])
        print(f"F1 {rep.f1:.4f} -> {outputs['report']}")
    return 0


def cmd_evaluate(cfg, replaying=False) -> int:
    model_path, series_path, model = _load_inputs(cfg)
    out = _out_dir(cfg)
    outputs = {"report": out / "report.txt", "excerpt": out / "excerpt.csv"}
    write_manifest(out, "evaluate", cfg, {"model": model_path, "series": series_path}, model.config.seed, outputs)
    hh = _load_household(series_path, 0, cfg["input"]["columns"])
    app = model.appliance
    if app not in hh.channels:
        raise UsageError(f"{series_path} has no ground-truth column {app!r}")
    truth, agg = hh.channels[app], hh.aggregate
    cfgm = model.config
    name = f"{cfgm.family}-{cfgm.head}"
    reports = []
    if cfgm.head == "regression":
        pred = predict_series(model, agg)
        reports.append(evaluate(pred, truth, agg, app, name, threshold=model.threshold,
                                receptive_field=cfgm.receptive_field, target_field=cfgm.target_field))
        reports.append(baseline_always_zero(truth, agg, app))
        reports.append(baseline_always_mean(truth, agg, app, model.appliance_stats))
        length = int(cfg["evaluate"]["excerpt_length"])
        if length > 0:
            write_excerpt(outputs["excerpt"], truth, {name: pred}, agg, 0, length)
    else:
        states = detect_onoff_classifier(model, agg)
        reports.append(evaluate(None, truth, agg, app, name, threshold=model.threshold, pred_states=states,
                                receptive_field=cfgm.receptive_field, target_field=cfgm.target_field))
    notes = [n.strip() for n in cfg["evaluate"]["notes"].split(";") if n.strip()]
    emit_report(reports, outputs["report"], notes)
    for rep in reports:
        print(f"{rep.model}: MAE {rep.mae:.4g} SAE {rep.sae:.4g} F1 {rep.f1:.4g}")
    return 0


def sweep_grid(families: Sequence[str], receptive_fields: Optional[Sequence[int]] = None,
               target_fields: Sequence[int] = TARGET_FIELD_PRESETS, fixed_receptive_field: int = 127,
               fixed_target_field: int = 10) -> List[tuple]:
    """(family, L, r) cells: an L sweep at ``fixed_target_field`` and an r
    sweep at ``fixed_receptive_field``. CNN and RNN skip L above 511."""
    cells = []
    for fam in families:
        Ls = list(receptive_fields) if receptive_fields else list(RECEPTIVE_FIELD_PRESETS)
        if fam in ("cnn", "rnn"):
            Ls = [L for L in Ls if L <= CNN_RNN_MAX_RECEPTIVE_FIELD]
        cells += [(fam, L, fixed_target_field) for L in Ls]
        cells += [(fam, fixed_receptive_field, r) for r in target_fields
                  if (fam, fixed_receptive_field, r) not in cells]
    return cells


def _atomic_json(path: Path, obj):
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def cmd_sweep(cfg, replaying=False) -> int:
    sw = cfg["sweep"]
    appliance = cfg["data"]["appliance"].strip()
    threshold = _threshold(cfg)
    paths = _train_paths(cfg)
    test_path = _existing(cfg["data"]["test"].strip(), "test series")
    cells = sweep_grid(_list(sw["families"]), _list(sw["receptive_fields"], int) or None,
                       _list(sw["target_fields"], int), int(sw["fixed_receptive_field"]),
                       int(sw["fixed_target_field"]))
    out = _out_dir(cfg)
    outputs = {"state": out / "sweep_state.json", "report": out / "sweep_report.txt",
               "mae_vs_L": out / "curve_mae_vs_L.csv", "ms_vs_L": out / "curve_ms_vs_L.csv",
               "mae_vs_r": out / "curve_mae_vs_r.csv"}
    inputs = {f"train{i}": p for i, p in enumerate(paths)}
    inputs["test"] = test_path
    write_manifest(out, "sweep", cfg, inputs, int(cfg["train"]["seed"]), outputs)
    state = {"cells": {}}
    if outputs["state"].exists():
        state = json.loads(outputs["state"].read_text(encoding="utf-8"))
    households = [_load_household(p, i + 1, cfg["input"]["columns"]) for i, p in enumerate(paths)]
    test = _load_household(test_path, 0, cfg["input"]["columns"])
    agg_stats = compute_norm_stats([hh.aggregate for hh in households], "aggregate")
    app_stats = compute_norm_stats([hh.channels[appliance] for hh in households], appliance)
    tc = train_config(cfg)
    tc = TrainConfig(**{**tc.__dict__, "framework": "regression", "max_iterations": int(sw["max_iterations"]),
                        "eval_every": int(sw["eval_every"])})
    for fam, L, r in cells:
        key = f"{fam}:{L}:{r}"
        if state["cells"].get(key, {}).get("status") == "ok":
            continue
        try:
            mc = model_config(cfg, "regression").replace(family=fam, layers=None, receptive_field=L,
                                                        target_field=r)
            ds = make_dataset(households, appliance, L, r, agg_stats, app_stats, threshold=threshold)
            if len(ds) == 0:
                raise ValueError("no training window fits")
            network = build_model(mc)
            run = train(network, ds, tc)
            model = TrainedModel(network, agg_stats, app_stats, appliance, threshold)
            rep = evaluate(predict_series(model, test.aggregate), test.channels[appliance], test.aggregate,
                           appliance, fam, threshold=threshold, receptive_field=L, target_field=r)
            state["cells"][key] = {"status": "ok", "family": fam, "receptive_field": L, "target_field": r,
                                   "mae": rep.mae, "sae": rep.sae, "f1": rep.f1, "ms_per_iter": run.ms_per_iteration}
        except Exception as exc:  # recorded per cell; the sweep goes on
            logger.debug("cell %s failed", key, exc_info=True)
            state["cells"][key] = {"status": "failed", "family": fam, "receptive_field": L, "target_field": r,
                                   "error": f"{type(exc).__name__}: {exc}"}
            print(f"cell {key} failed: {exc}", file=sys.stderr)
        _atomic_json(outputs["state"], state)
    rows = [state["cells"][f"{f}:{L}:{r}"] for f, L, r in cells]
    fixed_r, fixed_L = int(sw["fixed_target_field"]), int(sw["fixed_receptive_field"])
    fam_order = {f: i for i, f in enumerate(dict.fromkeys(c["family"] for c in rows))}
    by_L = sorted((c for c in rows if c["target_field"] == fixed_r),
                  key=lambda c: (fam_order[c["family"]], c["receptive_field"]))
    by_r = sorted((c for c in rows if c["receptive_field"] == fixed_L),
                  key=lambda c: (fam_order[c["family"]], c["target_field"]))
    write_curve(outputs["mae_vs_L"], by_L, ["family", "receptive_field", "mae", "status"])
    write_curve(outputs["ms_vs_L"], by_L, ["family", "receptive_field", "ms_per_iter", "status"])
    write_curve(outputs["mae_vs_r"], by_r, ["family", "target_field", "mae", "status"])
    reports = [MetricsReport(appliance, c["family"], c["receptive_field"], c["target_field"], mae=c["mae"],
                             sae=c["sae"], f1=c["f1"]) for c in rows if c["status"] == "ok"]
    emit_report(reports, outputs["report"], notes=["desk-scale sweep on the configured households"])
    failed = [c for c in rows if c["status"] != "ok"]
    print(f"{len(rows) - len(failed)}/{len(rows)} cells ok -> {outputs['report']}")
    return 1 if failed else 0


HANDLERS = {"synth": cmd_synth, "ingest": cmd_ingest, "train": cmd_train, "predict": cmd_predict,
            "detect": cmd_detect, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def cmd_replay(manifest_path: Path, overrides) -> int:
    manifest = json.loads(_existing(str(manifest_path), "manifest").read_text(encoding="utf-8"))
    command = manifest.get("command")
    if command not in HANDLERS:
        raise UsageError(f"{manifest_path}: unknown command {command!r}")
    for path, digest in manifest.get("inputs", {}).items():
        if sha256_file(_existing(path, "manifest input")) != digest:
            raise UsageError(f"input {path} changed since the manifest was written")
    cfg = copy.deepcopy(DEFAULTS)
    for section, values in manifest["config"].items():
        for key, value in values.items():
            cfg[section][key] = value
    for section, key, value in overrides:
        if (section, key) not in (("output", "dir"),):
            raise UsageError("replay only accepts --output.dir overrides")
        _set(cfg, section, key, value)
    return HANDLERS[command](cfg, replaying=True)


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavenilm", description="Sequence-to-point energy disaggregation.")
    parser.add_argument("--version", action="version", version=f"wavenilm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help=f"INI file (default: ${CONFIG_DIR_ENV}/{name}.ini if present)")
        p.add_argument("--out", help="output directory")
        if name in ("predict", "detect", "evaluate"):
            p.add_argument("model", nargs="?", help="model file")
            p.add_argument("series", nargs="?", help="meter CSV")
        if name == "ingest":
            p.add_argument("series", nargs="?", help="raw meter CSV")
        if name in ("train", "sweep"):
            p.add_argument("--family", choices=("wavenet", "cnn", "rnn"))
            p.add_argument("--layers", type=int)
            p.add_argument("--receptive-field", type=int)
            p.add_argument("--target-field", type=int)
            p.add_argument("--seed", type=int)
            p.add_argument("--iterations", type=int)
            p.add_argument("--appliance")
        if name == "train":
            p.add_argument("--framework", choices=("regression", "classification"))
        if name == "detect":
            p.add_argument("--framework", choices=("regression", "classification"))
            p.add_argument("--cutoff", type=float)
            p.add_argument("--threshold", type=float)
    rp = sub.add_parser("replay", help="re-run a command from its manifest")
    rp.add_argument("manifest")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = parse_overrides(extra)
    if args.command == "replay":
        return cmd_replay(Path(args.manifest), overrides)
    cfg = load_config(_resolve_config_path(args.config, args.command))
    flags = list(overrides)
    for flag, (section, key) in SHORTCUTS.items():
        value = getattr(args, flag, None)
        if value is not None:
            if flag == "framework" and args.command == "detect":
                section = "detect"
            flags.append((section, key, value))
    if getattr(args, "model", None):
        flags.append(("input", "model", args.model))
    if getattr(args, "series", None):
        flags.append(("input", "series", args.series))
    apply_layer(cfg, flags)
    return HANDLERS[args.command](cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code) if isinstance(exc.code, int) else 2
    except (UsageError, IngestError, FormatError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1
    except Exception as exc:
        traceback.print_exc()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
