#!/usr/bin/env python3
"""
SuMi command line: source training, adaptation runs, sweeps, the ablation
grid and report summaries.

Usage:
    python sumi/scripts/sumi.py train-source [--config FILE] [--seed 0,1]
    python sumi/scripts/sumi.py adapt --stream "noise-u1:0.5,mix:0.5@5" --adapter sumi,source
    python sumi/scripts/sumi.py adapt --config sumi/config/desk.yaml
    python sumi/scripts/sumi.py sweep --ratios --severity mixed
    python sumi/scripts/sumi.py sweep --vary beta=0.6,0.9 --vary t0=0.5iter,0.75iter
    python sumi/scripts/sumi.py ablate --out runs/ablation
    python sumi/scripts/sumi.py report runs/ablation

Exit code is 0 only when every cell completed.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List

# Add scripts directory to path for imports
sys.path.insert(0, str(Path(__file__).parent))

from datagen import SourceTrainingError, make_task, write_samples
from harness import (
    ConfigError,
    ExperimentConfig,
    ablation_table,
    emit_report,
    format_summary,
    load_config,
    load_report,
    open_ledger,
    parse_vary,
    ratio_sweep,
    run_experiment,
    source_model,
    task_for_seed,
)
from selection import canonical_quantile_mode, canonical_schedule

DEFAULT_CONFIG = Path(__file__).parent.parent / "config" / "default.yaml"
DESK_CONFIG = DEFAULT_CONFIG.with_name("desk.yaml")


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def build_overrides(args) -> Dict:
    """Config overrides from command-line flags; only flags actually given."""
    overrides: Dict = {}
    adapt: Dict = {}
    if getattr(args, "seed", None):
        overrides["seeds"] = [int(s) for s in _csv_list(args.seed)]
    if getattr(args, "adapter", None):
        overrides["adapters"] = _csv_list(args.adapter)
    if getattr(args, "stream", None):
        overrides["streams"] = list(args.stream)
    if getattr(args, "out", None):
        overrides["out"] = str(args.out)
    if getattr(args, "quantile_mode", None):
        adapt["quantile_mode"] = canonical_quantile_mode(args.quantile_mode)
    if getattr(args, "schedule", None):
        adapt["schedule"] = canonical_schedule(args.schedule)
    if getattr(args, "balance_term", None):
        adapt["balance_term"] = args.balance_term == "on"
    if getattr(args, "lr", None) is not None:
        adapt["learning_rate"] = args.lr
    if getattr(args, "batch_size", None) is not None:
        adapt["batch_size"] = args.batch_size
    if getattr(args, "iterations", None) is not None:
        adapt["iterations"] = args.iterations
    if adapt:
        overrides["adapt"] = adapt
    if getattr(args, "no_cache", False):
        overrides["cache"] = False
    return overrides


def _load(args) -> ExperimentConfig:
    path = args.config or (DEFAULT_CONFIG if DEFAULT_CONFIG.exists() else None)
    return load_config(path, build_overrides(args))


def _finish(config: ExperimentConfig, args) -> int:
    report = run_experiment(config)
    print(format_summary(report))
    if config.ablation:
        print("\nAblation (iqr / ua / mis):")
        for row in ablation_table(report):
            flags = " ".join("✓" if row[k] else "⊘" for k in ("iqr", "ua", "mis"))
            mean = "failed" if row["mean_accuracy"] is None else f"{100 * row['mean_accuracy']:.2f}"
            print(f"  {flags}  {row['adapter']:<18} {mean}")
    if config.out:
        print(f"\nReports written to {config.out}")
    if report.failures:
        print(f"\n✗ {len(report.failures)} of {len(report.cells)} cell(s) failed")
        for cell in report.failures:
            print(f"  {cell.stream} / {cell.adapter} / seed {cell.seed}: {cell.error}")
        return 1
    print(f"\n✓ {len(report.cells)} cell(s) completed")
    return 0


def cmd_train_source(args) -> int:
    config = _load(args)
    ledger = open_ledger() if config.cache else None
    failed = 0
    for seed in config.seeds:
        bundle = source_model(config, seed, ledger)
        if bundle.model is None:
            print(f"✗ seed {seed}: {bundle.error}")
            failed += 1
            continue
        print(f"✓ seed {seed}: clean accuracy {bundle.clean_accuracy:.4f}")
        if args.save:
            path = bundle.model.save(Path(args.save) / f"source-seed{seed}.npz", bundle.clean_accuracy)
            print(f"  saved {path}")
        if args.export_samples:
            train, test = make_task(task_for_seed(config, seed))
            root = Path(args.export_samples)
            write_samples(root / f"train-seed{seed}.csv", train, config.task.num_classes)
            write_samples(root / f"test-seed{seed}.csv", test, config.task.num_classes)
            print(f"  exported samples to {root}")
    return 1 if failed else 0


def cmd_adapt(args) -> int:
    return _finish(_load(args), args)


def cmd_sweep(args) -> int:
    if not args.ratios and not args.vary:
        print("✗ sweep needs --ratios and/or --vary")
        return 2
    config = _load(args)
    if args.ratios:
        severity = args.severity if args.severity == "mixed" else int(args.severity)
        config = ratio_sweep(config, severity=severity)
    for spec in args.vary or []:
        key, values = parse_vary(spec)
        config.vary[key] = values
    config.validate()
    return _finish(config, args)


def cmd_ablate(args) -> int:
    config = _load(args)
    config.ablation = True
    return _finish(config, args)


def cmd_report(args) -> int:
    report = load_report(args.path)
    if args.format == "json":
        print(json.dumps(report.summary, indent=2))
    else:
        print(format_summary(report))
    if args.csv:
        emit_report(report, args.csv, formats=("csv",))
        print(f"\n✓ CSV written to {args.csv}")
    return 0 if report.ok else 1


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", type=Path,
                        help=f"Config file (default: {DEFAULT_CONFIG.name}; end-to-end desk runs: {DESK_CONFIG.name})")
    parser.add_argument("--seed", help="Comma-separated experiment seeds")
    parser.add_argument("--out", help="Report directory")
    parser.add_argument("--no-cache", action="store_true", help="Do not use the checkpoint cache")
    parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")


def _add_adapt_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--adapter", help="Comma-separated adapter kinds")
    parser.add_argument("--stream", action="append", help="Stream spec, e.g. 'noise-u1:0.5,mix:0.5@5' (repeatable)")
    parser.add_argument("--quantile-mode", choices=["minmax", "order", "minmax-interp", "order-stat"])
    parser.add_argument("--schedule", choices=["linear", "exp", "log", "exponential", "logarithmic"])
    parser.add_argument("--balance-term", choices=["on", "off"])
    parser.add_argument("--lr", type=float, help="Adaptation learning rate")
    parser.add_argument("--batch-size", type=int, help="Adaptation batch size")
    parser.add_argument("--iterations", type=int, help="Override the iteration horizon")


def main():
    parser = argparse.ArgumentParser(description="SuMi test-time adaptation experiments")
    subparsers = parser.add_subparsers(dest="command")

    train_parser = subparsers.add_parser("train-source", help="Train or load source models")
    _add_common(train_parser)
    train_parser.add_argument("--save", help="Also copy checkpoints to this directory")
    train_parser.add_argument("--export-samples", help="Write train/test samples files to this directory")
    train_parser.set_defaults(func=cmd_train_source)

    adapt_parser = subparsers.add_parser("adapt", help="Run the stream x adapter x seed grid")
    _add_common(adapt_parser)
    _add_adapt_flags(adapt_parser)
    adapt_parser.set_defaults(func=cmd_adapt)

    sweep_parser = subparsers.add_parser("sweep", help="Mixed-ratio and hyperparameter sweeps")
    _add_common(sweep_parser)
    _add_adapt_flags(sweep_parser)
    sweep_parser.add_argument("--ratios", action="store_true", help="Strong-OOD ratios 0.0 .. 0.9")
    sweep_parser.add_argument("--severity", default="5", help="Severity 1..5 or 'mixed' for --ratios")
    sweep_parser.add_argument("--vary", action="append", help="key=v1,v2,... over an adapt field (repeatable)")
    sweep_parser.set_defaults(func=cmd_sweep)

    ablate_parser = subparsers.add_parser("ablate", help="The 8-row IQR/UA/MIS grid")
    _add_common(ablate_parser)
    _add_adapt_flags(ablate_parser)
    ablate_parser.set_defaults(func=cmd_ablate)

    report_parser = subparsers.add_parser("report", help="Summarize a written report")
    report_parser.add_argument("path", help="Report directory or report.json")
    report_parser.add_argument("--format", choices=["table", "json"], default="table")
    report_parser.add_argument("--csv", help="Re-emit cells.csv / summary.csv to this directory")
    report_parser.add_argument("--verbose", "-v", action="store_true", help="Debug logging")
    report_parser.set_defaults(func=cmd_report)

    args = parser.parse_args()
    if not args.command:
        parser.print_help()
        return 1

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"✗ Config error: {e}")
        return 2
    except SourceTrainingError as e:
        print(f"✗ {e}")
        return 1


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\nCancelled by user")
        sys.exit(1)
    except Exception as e:
        print(f"\n✗ Unexpected error: {e}")
        import traceback
        traceback.print_exc()
        sys.exit(1)
