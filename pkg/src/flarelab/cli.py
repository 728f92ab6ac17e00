"""Command-line front end.

    flarelab init-config cfg.json
    flarelab train-base --config cfg.json
    flarelab train-xlt --config cfg.json --method flare --fusion add_relu --r 8
    flarelab eval --config cfg.json
    flarelab probe --config cfg.json
    flarelab sweep rank --config cfg.json
    flarelab report runs/
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .adapters import FUSION_FUNCTIONS
from .checkpoint import CheckpointError
from .experiment import (ALL_METHODS, EVAL_METHODS, SWEEP_KINDS, ConfigError, ExperimentConfig, Workspace,
                         run_experiment, sweep)
from .report import emit_report
from .train import TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("flarelab")


def _add_config_flags(p: argparse.ArgumentParser, method: bool = True) -> None:
    p.add_argument("--config", type=Path, help="experiment config JSON (defaults if omitted)")
    p.add_argument("--output-dir", help="override the config's output directory")
    p.add_argument("--task", choices=("classification", "span"))
    p.add_argument("--seed", type=int, action="append", help="seed; repeat for several")
    if method:
        p.add_argument("--method", action="append", choices=ALL_METHODS, help="method; repeat for several")
    p.add_argument("--fusion", choices=FUSION_FUNCTIONS)
    p.add_argument("--r", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mt-quality", type=float, help="MT quality q for train and eval translation")
    p.add_argument("--source-offset", type=int, choices=(0, 1))
    p.add_argument("--epochs", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flarelab", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-config", help="write a default experiment config")
    p.add_argument("path", type=Path)

    p = sub.add_parser("train-base", help="train (or reuse) the English base model per seed")
    _add_config_flags(p, method=False)

    p = sub.add_parser("train-xlt", help="translate-train every configured method")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="zero-shot and translate-test baselines")
    _add_config_flags(p, method=False)

    p = sub.add_parser("probe", help="train FLARE and write adapter activation probes")
    _add_config_flags(p, method=False)

    p = sub.add_parser("sweep", help="run a sweep and write its comparison table")
    p.add_argument("kind", choices=SWEEP_KINDS)
    _add_config_flags(p)

    p = sub.add_parser("report", help="aggregate finished runs into tables and figures")
    p.add_argument("root", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--no-figures", action="store_true")
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    updates = {}
    if args.output_dir:
        updates["output_dir"] = args.output_dir
    if args.task:
        updates["task"] = args.task
    if args.seed:
        updates["seeds"] = list(args.seed)
    if getattr(args, "method", None):
        updates["methods"] = list(args.method)
    if args.fusion:
        updates["fusion"] = args.fusion
    if args.r is not None:
        updates["r"] = args.r
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if args.mt_quality is not None:
        updates["q_train"] = updates["q_eval"] = args.mt_quality
    if args.source_offset is not None:
        updates["source_offset"] = args.source_offset
    if args.epochs is not None:
        updates["train"] = replace(config.train, epochs=args.epochs)
    # round-trip through the dict form so overrides get the same validation
    merged = {**config.to_dict(), **{k: v for k, v in updates.items() if k != "train"}}
    if "train" in updates:
        merged["train"] = asdict(updates["train"])
    return ExperimentConfig.from_dict(merged)


def _print_run(summary) -> int:
    print(f"run directory: {summary.run_dir}")
    for failure in summary.failures:
        print(f"FAILED {failure['cell']}: {failure['error']}", file=sys.stderr)
    return EXIT_OK if summary.ok else EXIT_RUNTIME


def cmd_train_base(args) -> int:
    config = load_config(args)
    ws = Workspace(config, Path(config.output_dir))
    for seed in config.seeds:
        _, info = ws.base(seed)
        print(f"seed {seed}: english {config.metric_name} {info['english_metric']:.4f} "
              f"-> {ws.base_dir(seed) / 'base.ckpt'}")
    return EXIT_OK


def cmd_run(args, methods=None) -> int:
    config = load_config(args)
    if methods is not None:
        config = replace(config, methods=methods)
    return _print_run(run_experiment(config))


def cmd_probe(args) -> int:
    config = replace(load_config(args), methods=["flare"], probe=True)
    summary = run_experiment(config)
    code = _print_run(summary)
    for path in sorted(summary.run_dir.rglob("probe_layers_query.csv")):
        print(path)
    return code


def cmd_sweep(args) -> int:
    config = load_config(args)
    result = sweep(args.kind, config)
    print(f"sweep table: {result.directory / 'sweep_table.csv'}")
    for row in result.table:
        if row["metric"] in ("accuracy", "exact_match"):
            std = "" if row["std"] is None else f" ± {row['std']:.4f}"
            print(f"  {row['variant']:<16} {row['method']:<14} {row['language']:<5} {row['mean']:.4f}{std}")
    return EXIT_OK if result.ok else EXIT_RUNTIME


def cmd_report(args) -> int:
    if not args.root.is_dir():
        raise ConfigError(f"report root {args.root} is not a directory")
    files = emit_report(args.root, args.out, figures=not args.no_figures)
    for key in sorted(files):
        print(f"{key}: {files[key]}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "init-config":
            ExperimentConfig().save(args.path)
            print(args.path)
            return EXIT_OK
        if args.command == "train-base":
            return cmd_train_base(args)
        if args.command == "train-xlt":
            return cmd_run(args)
        if args.command == "eval":
            return cmd_run(args, methods=list(EVAL_METHODS))
        if args.command == "probe":
            return cmd_probe(args)
        if args.command == "sweep":
            return cmd_sweep(args)
        if args.command == "report":
            return cmd_report(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CheckpointError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    parser.error(f"unknown command {args.command}")
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
