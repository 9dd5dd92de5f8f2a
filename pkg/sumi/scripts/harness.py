#!/usr/bin/env python3
"""
Experiment orchestration: configuration, source-model caching, the
(stream, adapter, seed) cell grid, ablation and sweep expansion, aggregation
and report emission.

Each experiment seed is a full replicate: it seeds the task, the source
training and the stream. Cells run on a bounded thread pool (SUMI_THREADS)
and are merged in sorted order, so reports depend only on the config.
"""

import csv
import itertools
import json
import logging
import math
import os
import re
import sqlite3
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import yaml

from adapt import ADAPTER_KINDS, RunReport, iteration_count, run_adaptation
from checkpoint_ledger import CheckpointLedger, fingerprint
from datagen import (
    STRONG_KINDS,
    SourceTrainingError,
    StreamSpec,
    TaskSpec,
    make_stream,
    make_task,
    parse_stream_spec,
    ratio_stream,
    read_samples,
    train_source,
)
from model import CheckpointError, ModelSpec, MultimodalClassifier, MultimodalSample
from objective import AdaptConfig

logger = logging.getLogger(__name__)

REPORT_SCHEMA = "sumi-report"
REPORT_VERSION = 1
CELLS_CSV_VERSION = 1

CONFIG_SECTIONS = ("task", "model", "adapt", "training", "streams", "adapters",
                   "seeds", "out", "ablation", "vary", "cache")
DEFAULT_SEEDS = (0, 1, 2, 3, 4)
DEFAULT_STREAM = "strong=0.5@5"
RATIO_GRID = tuple(round(0.1 * i, 1) for i in range(10))
ABLATION_SWITCHES = ("use_iqr", "use_ua", "use_mis")
THREADS_ENV = "SUMI_THREADS"
T0_FRACTION = re.compile(r"^(\d+(\.\d*)?|\.\d+)?iter$")


class ConfigError(ValueError):
    """Invalid or unknown configuration."""


@dataclass
class TrainingConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 64
    min_accuracy: Optional[float] = 0.9

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass(frozen=True)
class FrozenStream:
    """A stream read from a samples file instead of generated."""
    path: str
    name: Optional[str] = None

    @property
    def label(self) -> str:
        return self.name or Path(self.path).stem

    def to_dict(self) -> Dict:
        return {"file": self.path, "name": self.name}


@dataclass(frozen=True)
class AdapterVariant:
    """An adapter kind plus AdaptConfig overrides, under a report name."""
    name: str
    kind: str
    overrides: Tuple[Tuple[str, object], ...] = ()

    def apply(self, config: AdaptConfig) -> AdaptConfig:
        return replace(config, **dict(self.overrides))


@dataclass
class ExperimentConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    streams: List[Union[StreamSpec, FrozenStream]] = field(default_factory=lambda: [parse_stream_spec(DEFAULT_STREAM)])
    adapters: List[str] = field(default_factory=lambda: list(ADAPTER_KINDS))
    seeds: List[int] = field(default_factory=lambda: list(DEFAULT_SEEDS))
    out: Optional[str] = None
    ablation: bool = False
    vary: Dict[str, List] = field(default_factory=dict)
    cache: bool = True

    def validate(self):
        if not self.streams:
            raise ConfigError("at least one stream is required")
        if not self.adapters and not self.ablation:
            raise ConfigError("at least one adapter is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        for kind in self.adapters:
            if kind not in ADAPTER_KINDS:
                raise ConfigError(f"unknown adapter {kind!r}, expected one of {ADAPTER_KINDS}")
        if self.model.input_dims != self.task.input_dims or self.model.num_classes != self.task.num_classes:
            raise ConfigError(
                f"model spec {self.model.input_dims}/{self.model.num_classes} does not match "
                f"task {self.task.input_dims}/{self.task.num_classes}")
        known = {f.name for f in fields(AdaptConfig)}
        for key in self.vary:
            if key not in known:
                raise ConfigError(f"cannot vary unknown adapt key {key!r}")
        labels = [s.label for s in self.streams]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"stream labels must be unique, got {labels}")
        adapt = self.adapt
        if isinstance(adapt.t0, str):
            if not T0_FRACTION.match(adapt.t0.strip()):
                raise ConfigError(f"adapt: t0 must be an integer or '<fraction>iter', got {adapt.t0!r}")
            adapt = replace(adapt, t0=None)
        try:
            adapt.validate()
        except ValueError as e:
            raise ConfigError(f"adapt: {e}") from e

    def to_dict(self) -> Dict:
        return {
            "task": self.task.to_dict(),
            "model": self.model.to_dict(),
            "adapt": self.adapt.to_dict(),
            "training": self.training.to_dict(),
            "streams": [s.to_dict() for s in self.streams],
            "adapters": list(self.adapters),
            "seeds": list(self.seeds),
            "out": self.out,
            "ablation": self.ablation,
            "vary": {k: list(v) for k, v in self.vary.items()},
            "cache": self.cache,
        }


# -----------------------------------------------------------------------------
# Loading
# -----------------------------------------------------------------------------


def _section(raw: Dict, name: str, builder):
    try:
        return builder(raw.get(name) or {})
    except KeyError as e:
        raise ConfigError(f"{name}: {e.args[0]}") from None
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


def _stream_from(entry) -> Union[StreamSpec, FrozenStream]:
    if isinstance(entry, str):
        return parse_stream_spec(entry)
    if isinstance(entry, dict) and "file" in entry:
        unknown = set(entry) - {"file", "name"}
        if unknown:
            raise KeyError(f"unknown stream keys: {sorted(unknown)}")
        return FrozenStream(path=str(entry["file"]), name=entry.get("name"))
    if isinstance(entry, dict):
        return StreamSpec.from_dict(entry)
    raise ValueError(f"stream entry must be a string or mapping, got {entry!r}")


def config_from_dict(raw: Dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed YAML; missing keys take defaults."""
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a mapping, got {type(raw).__name__}")
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

    task = _section(raw, "task", TaskSpec.from_dict)
    model_keys = dict(raw.get("model") or {})
    model_keys.setdefault("input_dims", task.input_dims)
    model_keys.setdefault("num_classes", task.num_classes)
    model = _section({"model": model_keys}, "model", ModelSpec.from_dict)

    def training_from(data):
        known = {f.name for f in fields(TrainingConfig)}
        if set(data) - known:
            raise KeyError(f"unknown training keys: {sorted(set(data) - known)}")
        return TrainingConfig(**data)

    config = ExperimentConfig(
        task=task,
        model=model,
        adapt=_section(raw, "adapt", AdaptConfig.from_dict),
        training=_section(raw, "training", training_from),
    )
    if raw.get("streams") is not None:
        config.streams = _section(raw, "streams", lambda entries: [_stream_from(e) for e in entries])
    if raw.get("adapters") is not None:
        config.adapters = [str(a) for a in raw["adapters"]]
    if raw.get("seeds") is not None:
        config.seeds = [int(s) for s in raw["seeds"]]
    config.out = raw.get("out", config.out)
    config.ablation = bool(raw.get("ablation", False))
    config.vary = {str(k): list(v) for k, v in (raw.get("vary") or {}).items()}
    config.cache = bool(raw.get("cache", True))
    config.validate()
    return config


def _merge(base: Dict, overrides: Optional[Dict]) -> Dict:
    merged = dict(base)
    for key, value in (overrides or {}).items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = {**merged[key], **value}
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[Path] = None, overrides: Optional[Dict] = None) -> ExperimentConfig:
    """Read a YAML (or JSON) config file and apply overrides section by section."""
    raw: Dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(_merge(raw, overrides))


def parse_vary(text: str) -> Tuple[str, List]:
    """'beta=0.6,0.9' -> ('beta', [0.6, 0.9]); values are parsed as YAML scalars."""
    key, sep, values = text.partition("=")
    if not sep or not values:
        raise ConfigError(f"expected key=v1,v2,... got {text!r}")
    return key.strip(), [yaml.safe_load(v.strip()) for v in values.split(",")]


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if count < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1, got {count}")
    return count


# -----------------------------------------------------------------------------
# Variants
# -----------------------------------------------------------------------------


def ablation_variants() -> List[AdapterVariant]:
    """The 8 sumi on/off combinations, fewest components first."""
    combos = sorted(itertools.product((False, True), repeat=3), key=lambda c: (sum(c), [not x for x in c]))
    variants = []
    for combo in combos:
        enabled = [name[len("use_"):] for name, on in zip(ABLATION_SWITCHES, combo) if on]
        label = "+".join(enabled) if enabled else "none"
        variants.append(AdapterVariant(f"sumi[{label}]", "sumi", tuple(zip(ABLATION_SWITCHES, combo))))
    return variants


def expand_variants(config: ExperimentConfig) -> List[AdapterVariant]:
    if config.ablation:
        return ablation_variants()
    base = [AdapterVariant(kind, kind) for kind in config.adapters]
    if not config.vary:
        return base
    keys = sorted(config.vary)
    variants = []
    for variant in base:
        for values in itertools.product(*(config.vary[k] for k in keys)):
            overrides = tuple(zip(keys, values))
            label = ",".join(f"{k}={v}" for k, v in overrides)
            variants.append(AdapterVariant(f"{variant.kind}[{label}]", variant.kind, overrides))
    return variants


def _resolve_t0(config: AdaptConfig, n_samples: int) -> AdaptConfig:
    """Turn a t0 written as a fraction of iter ('0.75iter') into an iteration count."""
    if isinstance(config.t0, str):
        text = config.t0.strip()
        if not text.endswith("iter"):
            raise ConfigError(f"t0 must be an integer or '<fraction>iter', got {config.t0!r}")
        fraction = float(text[:-len("iter")] or 1.0)
        return replace(config, t0=int(math.floor(fraction * iteration_count(n_samples, config))))
    return config


# -----------------------------------------------------------------------------
# Reports
# -----------------------------------------------------------------------------


@dataclass
class CellResult:
    stream: str
    adapter: str
    seed: int
    status: str
    accuracy: Optional[float] = None
    domain_accuracy: Dict[str, float] = field(default_factory=dict)
    mean_selected: Optional[float] = None
    clean_accuracy: Optional[float] = None
    error: Optional[str] = None
    run: Optional[RunReport] = None

    @property
    def key(self) -> Tuple[str, str, int]:
        return (self.stream, self.adapter, self.seed)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    def to_dict(self) -> Dict:
        data = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "run"}
        data["run"] = self.run.to_dict() if self.run is not None else None
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "CellResult":
        data = dict(data)
        run = data.pop("run", None)
        return cls(**data, run=RunReport.from_dict(run) if run is not None else None)


@dataclass
class ExperimentReport:
    config: Dict
    cells: List[CellResult]
    summary: List[Dict]
    schema: str = REPORT_SCHEMA
    version: int = REPORT_VERSION

    @property
    def failures(self) -> List[CellResult]:
        return [c for c in self.cells if not c.ok]

    @property
    def ok(self) -> bool:
        return not self.failures

    def to_dict(self) -> Dict:
        return {
            "schema": self.schema,
            "version": self.version,
            "csv_version": CELLS_CSV_VERSION,
            "config": self.config,
            "cells": [c.to_dict() for c in self.cells],
            "summary": self.summary,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentReport":
        if data.get("schema") != REPORT_SCHEMA or data.get("version") != REPORT_VERSION:
            raise ValueError(f"expected {REPORT_SCHEMA} v{REPORT_VERSION}, got {data.get('schema')} v{data.get('version')}")
        return cls(
            config=data["config"],
            cells=[CellResult.from_dict(c) for c in data["cells"]],
            summary=data["summary"],
        )


def aggregate(cells: Sequence[CellResult]) -> List[Dict]:
    """Mean and std (ddof=1, 0 for a single seed) of accuracy per (stream, adapter)."""
    groups: Dict[Tuple[str, str], List[float]] = {}
    failed: Dict[Tuple[str, str], int] = {}
    for cell in cells:
        key = (cell.stream, cell.adapter)
        groups.setdefault(key, [])
        if cell.ok and cell.accuracy is not None:
            groups[key].append(cell.accuracy)
        else:
            failed[key] = failed.get(key, 0) + 1
    rows = []
    for (stream, adapter), values in sorted(groups.items()):
        n = len(values)
        rows.append({
            "stream": stream,
            "adapter": adapter,
            "mean_accuracy": float(np.mean(values)) if n else None,
            "std_accuracy": float(np.std(values, ddof=1)) if n > 1 else (0.0 if n else None),
            "n_seeds": n,
            "n_failed": failed.get((stream, adapter), 0),
        })
    return rows


def format_summary(report: ExperimentReport) -> str:
    """Console table: accuracy in points, mean ± std (n seeds)."""
    rows = report.summary
    if not rows:
        return "(no cells)"
    width_s = max(len("stream"), *(len(r["stream"]) for r in rows))
    width_a = max(len("adapter"), *(len(r["adapter"]) for r in rows))
    lines = [f"{'stream':<{width_s}}  {'adapter':<{width_a}}  accuracy", "-" * (width_s + width_a + 24)]
    for r in rows:
        if r["mean_accuracy"] is None:
            value = "failed"
        else:
            value = f"{100 * r['mean_accuracy']:6.2f} ± {100 * r['std_accuracy']:5.2f} (n={r['n_seeds']})"
        if r["n_failed"]:
            value += f"  ✗ {r['n_failed']} failed"
        lines.append(f"{r['stream']:<{width_s}}  {r['adapter']:<{width_a}}  {value}")
    return "\n".join(lines)


def _domain_columns(cells: Sequence[CellResult]) -> List[str]:
    return sorted({tag for c in cells for tag in c.domain_accuracy})


def _fmt(value) -> str:
    return "" if value is None else repr(value)


def emit_report(report: ExperimentReport, out_dir, formats: Sequence[str] = ("json", "csv")) -> List[Path]:
    """Write report.json (+ trace.jsonl) and cells.csv / summary.csv under out_dir."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out_dir}: {e}") from e
    written = []

    if "json" in formats:
        path = out_dir / "report.json"
        with open(path, "w") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        written.append(path)

        path = out_dir / "trace.jsonl"
        with open(path, "w") as f:
            for cell in report.cells:
                if cell.run is None:
                    continue
                for step in cell.run.trace:
                    event = {"stream": cell.stream, "adapter": cell.adapter, "seed": cell.seed, **step.to_dict()}
                    f.write(json.dumps(event, sort_keys=True) + "\n")
        written.append(path)

    if "csv" in formats:
        domains = _domain_columns(report.cells)
        path = out_dir / "cells.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stream", "adapter", "seed", "status", "accuracy", "mean_selected", "clean_accuracy"]
                            + [f"acc[{d}]" for d in domains])
            for c in report.cells:
                writer.writerow([c.stream, c.adapter, c.seed, c.status, _fmt(c.accuracy),
                                 _fmt(c.mean_selected), _fmt(c.clean_accuracy)]
                                + [_fmt(c.domain_accuracy.get(d)) for d in domains])
        written.append(path)

        path = out_dir / "summary.csv"
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["stream", "adapter", "mean_accuracy", "std_accuracy", "n_seeds", "n_failed"])
            for r in report.summary:
                writer.writerow([r["stream"], r["adapter"], _fmt(r["mean_accuracy"]),
                                 _fmt(r["std_accuracy"]), r["n_seeds"], r["n_failed"]])
        written.append(path)

    return written


def load_report(path) -> ExperimentReport:
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    with open(path) as f:
        return ExperimentReport.from_dict(json.load(f))


# -----------------------------------------------------------------------------
# Running
# -----------------------------------------------------------------------------


@dataclass
class SourceBundle:
    seed: int
    model: Optional[MultimodalClassifier]
    clean_accuracy: Optional[float]
    test: List[MultimodalSample]
    error: Optional[str] = None


def open_ledger(cache_dir: Optional[Path] = None) -> Optional[CheckpointLedger]:
    """The checkpoint ledger, or None (with a warning) when it cannot be opened."""
    try:
        return CheckpointLedger(cache_dir)
    except (sqlite3.Error, OSError) as e:
        logger.warning("checkpoint ledger unavailable (%s), training without cache", e)
        return None


def task_for_seed(config: ExperimentConfig, seed: int) -> TaskSpec:
    return replace(config.task, seed=seed)


def source_model(config: ExperimentConfig, seed: int, ledger: Optional[CheckpointLedger] = None) -> SourceBundle:
    """Train (or load from the checkpoint cache) the source model for one seed."""
    task = task_for_seed(config, seed)
    train, test = make_task(task)
    key = fingerprint(task.to_dict(), config.model.to_dict(), config.training.to_dict(), seed)

    if ledger is not None:
        try:
            row = ledger.lookup(key)
            if row is not None:
                model, meta = MultimodalClassifier.load(row["path"])
                ledger.touch(key)
                logger.info("seed %d: source model from cache [%s]", seed, key[:8])
                return SourceBundle(seed, model, meta.get("clean_accuracy"), test)
        except (sqlite3.Error, OSError, CheckpointError) as e:
            logger.warning("checkpoint cache unavailable (%s), retraining", e)

    try:
        model, accuracy = train_source(
            config.model, train, epochs=config.training.epochs, lr=config.training.lr, seed=seed,
            batch_size=config.training.batch_size, test=test, min_accuracy=config.training.min_accuracy)
    except SourceTrainingError as e:
        return SourceBundle(seed, None, e.accuracy, test, error=str(e))

    if ledger is not None:
        try:
            path = model.save(ledger.checkpoint_path(key), clean_accuracy=accuracy)
            ledger.record(key, path, task.to_dict(), config.model.to_dict(), config.training.to_dict(), seed, accuracy)
        except (sqlite3.Error, OSError) as e:
            logger.warning("could not cache checkpoint (%s)", e)
    return SourceBundle(seed, model, accuracy, test)


def _materialize(spec: Union[StreamSpec, FrozenStream], test: List[MultimodalSample], config: ExperimentConfig,
                 seed: int) -> Tuple[List[MultimodalSample], str]:
    """(stream samples, adaptation mode) for one seed."""
    if isinstance(spec, FrozenStream):
        samples, _ = read_samples(spec.path)
        strong = any((s.domain or "").split("@")[0] in STRONG_KINDS for s in samples)
        return samples, "wild" if strong else "weak"
    stream = make_stream(test, replace(spec, seed=seed), noise_scale=config.task.noise_scale)
    return stream, spec.mode


def run_cell(config: ExperimentConfig, spec, variant: AdapterVariant, bundle: SourceBundle) -> CellResult:
    """One (stream, adapter, seed) run on a private copy of the source model."""
    cell = CellResult(stream=spec.label, adapter=variant.name, seed=bundle.seed, status="failed",
                      clean_accuracy=bundle.clean_accuracy)
    if bundle.model is None:
        cell.error = bundle.error or "source model unavailable"
        return cell
    try:
        stream, mode = _materialize(spec, bundle.test, config, bundle.seed)
        adapt_config = _resolve_t0(variant.apply(config.adapt), len(stream))
        run = run_adaptation(bundle.model.copy(), stream, variant.kind, adapt_config, mode=mode)
    except Exception as e:
        logger.error("cell %s / %s / seed %d failed: %s", spec.label, variant.name, bundle.seed, e)
        cell.error = f"{type(e).__name__}: {e}"
        return cell
    cell.status = "ok"
    cell.accuracy = run.accuracy
    cell.domain_accuracy = run.domain_accuracy
    cell.mean_selected = run.selection["mean_selected"]
    cell.run = run
    logger.info("cell %s / %s / seed %d: accuracy %.4f", spec.label, variant.name, bundle.seed, run.accuracy or 0.0)
    return cell


def run_experiment(config: ExperimentConfig, ledger: Optional[CheckpointLedger] = None,
                   workers: Optional[int] = None) -> ExperimentReport:
    """Run every (stream, adapter, seed) cell and aggregate; writes files when config.out is set."""
    config.validate()
    workers = workers or worker_count()
    if ledger is None and config.cache:
        ledger = open_ledger()

    seeds = sorted(set(config.seeds))
    variants = expand_variants(config)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        bundles = dict(zip(seeds, pool.map(lambda s: source_model(config, s, ledger), seeds)))
        jobs = [(spec, variant, bundles[seed]) for spec in config.streams for variant in variants for seed in seeds]
        cells = list(pool.map(lambda job: run_cell(config, *job), jobs))

    cells.sort(key=lambda c: c.key)
    report = ExperimentReport(config=config.to_dict(), cells=cells, summary=aggregate(cells))
    if config.out:
        emit_report(report, config.out)
    return report


def ratio_sweep(config: ExperimentConfig, severity: object = 5, ratios: Sequence[float] = RATIO_GRID) -> ExperimentConfig:
    """Same experiment over the strong-OOD ratio grid."""
    return replace(config, streams=[ratio_stream(r, severity) for r in ratios])


def ablation_table(report: ExperimentReport) -> List[Dict]:
    """Summary rows of the ablation variants with their on/off switches."""
    switches = {v.name: dict(v.overrides) for v in ablation_variants()}
    rows = []
    for row in report.summary:
        if row["adapter"] in switches:
            rows.append({**row, **{k[len("use_"):]: on for k, on in switches[row["adapter"]].items()}})
    return rows
