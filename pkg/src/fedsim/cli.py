"""Command-line harness: ``run``, ``sweep`` and ``heatmap``.

Config files are flat ``key = value`` text; ``#`` starts a comment. Every
key can also be given as a flag (``--batch-size 20`` or ``--batch_size 20``)
and flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .engine import (
    ConfigError,
    QuadraticTask,
    RoundMetrics,
    RunConfig,
    attention_heatmap,
    build_task,
    run_training,
)
from .models import DivergenceError

log = logging.getLogger("fedsim")

CSV_HEADER = ["round", "train_loss", "test_accuracy", "drift", "elapsed_ms"]
_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_type(key: str):
    t = _FIELDS[key].type
    return _TYPES[t] if isinstance(t, str) else t


def coerce(key: str, raw):
    """Convert ``raw`` to the declared type of config key ``key``."""
    if key not in _FIELDS:
        raise ConfigError(key, "unknown config key")
    typ = _field_type(key)
    if isinstance(raw, typ) and not (typ is int and isinstance(raw, bool)):
        return raw
    if typ is bool:
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(key, f"expected a boolean, got {raw!r}")
    if typ is int:
        try:
            value = float(raw)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected an integer, got {raw!r}") from None
        if not value.is_integer():
            raise ConfigError(key, f"expected an integer, got {raw!r}")
        return int(value)
    if typ is float:
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(key, f"expected a number, got {raw!r}") from None
    return str(raw).strip()


def read_config_file(path) -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} of {path} is not 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        values[key] = coerce(key, raw)
    return values


def parse_config(path=None, overrides: Optional[Dict[str, object]] = None) -> RunConfig:
    values = read_config_file(path) if path else {}
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        values[key] = coerce(key, raw)
    return RunConfig(**values)


def config_from_dict(d: Dict[str, object]) -> RunConfig:
    return RunConfig(**{k: coerce(k, v) for k, v in d.items()})


# --------------------------------------------------------------------------
# outputs


def _fmt(x: float) -> str:
    return repr(float(x))


def metrics_row(m: RoundMetrics) -> List[str]:
    return [str(m.round), _fmt(m.train_loss), _fmt(m.test_accuracy), _fmt(m.drift),
            _fmt(m.elapsed_ms)]


def _json_number(x):
    return None if x is None or not math.isfinite(x) else float(x)


def write_matrix_csv(path, matrix: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in matrix:
            w.writerow([_fmt(v) for v in row])


def run_experiment(config: RunConfig, out_dir, heatmap: bool = False) -> int:
    """Run one configuration, writing ``metrics.csv`` and ``summary.json``.

    Returns 0 on success and 1 when training diverged; rows written before
    the divergence stay in the CSV and the summary is marked ``failed``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / "metrics.csv", "w", newline="")
    except OSError as exc:
        log.error("cannot write to %s: %s", out, exc)
        return 2
    summary = {"status": "ok", "config": config.to_dict()}
    with fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)

        def emit(m: RoundMetrics) -> None:
            writer.writerow(metrics_row(m))
            fh.flush()

        try:
            task = build_task(config)
            if heatmap:
                hm = attention_heatmap(config, task)
                for m in hm.training.metrics:
                    emit(m)
                result = hm.training
                write_matrix_csv(out / "heatmap.csv", hm.heatmap)
                summary["matching_rate"] = _json_number(hm.matching_rate)
                summary["paired_top_rate"] = _json_number(hm.paired_top_rate)
            else:
                result = run_training(config, task, on_metrics=emit)
        except DivergenceError as exc:
            log.error("run diverged: %s", exc)
            summary.update(status="failed", error=str(exc))
            _write_json(out / "summary.json", summary)
            return 1
    summary["summary_accuracy"] = _json_number(result.summary_accuracy)
    summary["final_drift"] = _json_number(result.final_drift)
    summary["evaluations"] = len(result.metrics)
    if isinstance(task, QuadraticTask):
        summary["final_distance"] = task.distance_to_optimum(result.server_state.params)
    _write_json(out / "summary.json", summary)
    return 0


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def parse_axis(spec: str):
    """``"lr=0.01,0.1"`` -> ``("lr", ["0.01", "0.1"])``.

    Several keys can move together: ``"batch_size:epochs=100:1,20:5"``.
    """
    if "=" not in spec:
        raise ConfigError(spec, "sweep axis must look like key=v1,v2,...")
    key, raw = spec.split("=", 1)
    keys = [k.strip().replace("-", "_") for k in key.split(":")]
    for k in keys:
        if k not in _FIELDS:
            raise ConfigError(k, "unknown config key")
    values = [v.strip() for v in raw.split(",") if v.strip()]
    if not values:
        raise ConfigError(key, "sweep axis has no values")
    return keys, values


def run_sweep(config: RunConfig, keys: Sequence[str], values: Iterable[str], out_dir) -> int:
    """One run per axis value, each in its own subdirectory, plus ``sweep.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    failures = 0
    for value in values:
        parts = value.split(":")
        if len(parts) != len(keys):
            raise ConfigError(":".join(keys), f"value {value!r} does not match the axis keys")
        changes = {k: coerce(k, p) for k, p in zip(keys, parts)}
        cell = config.replace(**changes)
        cell_dir = out / (":".join(keys) + "=" + value)
        status = run_experiment(cell, cell_dir)
        summary = json.loads((cell_dir / "summary.json").read_text())
        failures += status != 0
        rows.append([value, summary["status"], summary.get("summary_accuracy"),
                     summary.get("final_drift"), summary.get("final_distance")])
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["value", "status", "summary_accuracy", "final_drift", "final_distance"])
        for row in rows:
            w.writerow(["" if v is None else (_fmt(v) if isinstance(v, float) else v)
                        for v in row])
    return 1 if failures else 0


# --------------------------------------------------------------------------
# entry point


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key = value config file")
    parser.add_argument("--out", default="runs/latest", help="output directory")
    for name in _FIELDS:
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        parser.add_argument(*flags, dest=f"cfg_{name}", default=None, metavar="VALUE")


def _config_from_args(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items()
                 if k.startswith("cfg_") and v is not None}
    return parse_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="train one configuration")
    _add_config_flags(run)
    run.add_argument("--heatmap", action="store_true",
                     help="also write the averaged self-attention heatmap")
    sweep = sub.add_parser("sweep", help="run one configuration per axis value")
    _add_config_flags(sweep)
    sweep.add_argument("--axis", required=True, help="key=v1,v2,... or k1:k2=a1:b1,a2:b2")
    heat = sub.add_parser("heatmap", help="averaged self-attention scores and matching rate")
    _add_config_flags(heat)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = _config_from_args(args)
        if args.command == "run":
            return run_experiment(config, args.out, heatmap=args.heatmap)
        if args.command == "sweep":
            keys, values = parse_axis(args.axis)
            return run_sweep(config, keys, values, args.out)
        return run_experiment(config, args.out, heatmap=True)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"fedsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
