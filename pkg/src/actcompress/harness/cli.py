"""Command-line entry point: ``actcompress <subcommand> [options]``."""

from __future__ import annotations

import argparse
import os
import sys

from ..profiler import decompose_variance, heterogeneity_csv, heterogeneity_report
from .config import ESTIMATORS, LEVELS, ConfigError, TrainConfig, load_config
from .data import DataError
from .memory import memory_report
from .sweep import DEFAULT_BITS, adapt, run_bits_sweep, sweep_csv
from .train import make_run, train

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _common(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--level", choices=LEVELS)
    p.add_argument("--bits", type=float, help="average bits per element")
    p.add_argument("--group-size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="CSV output path (stdout if omitted)")
    p.add_argument("--estimator", choices=ESTIMATORS)
    p.add_argument("--ema-decay", type=float)
    p.add_argument("--model")
    p.add_argument("--dataset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="actcompress",
                                     description="Activation-compressed training at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="train and emit per-step metrics")
    _common(p)
    p.add_argument("--include-time", action="store_true", help="add the wall_time column")
    p = sub.add_parser("memreport", help="per-layer activation memory for one batch")
    _common(p)
    p = sub.add_parser("sweep", help="train across bit widths and levels")
    _common(p)
    p.add_argument("--bits-list", default=",".join(str(b) for b in DEFAULT_BITS))
    p.add_argument("--levels", default=None, help="comma-separated levels (default: --level)")
    p.add_argument("--trials", type=int, default=None)
    p = sub.add_parser("profile-variance", help="per-source gradient-variance decomposition")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--sampling-batches", type=int, default=100)
    p.add_argument("--adapt-steps", type=int, default=10)
    p = sub.add_parser("heterogeneity", help="range and sensitivity histograms")
    _common(p)
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    return cfg.with_overrides(level=args.level, bits=args.bits, group_size=args.group_size,
                              seed=args.seed, estimator=args.estimator, ema_decay=args.ema_decay,
                              model=args.model, dataset=args.dataset, epochs=args.epochs,
                              batch_size=args.batch_size, lr=args.lr)


def _emit(text: str, out):
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _floats(text, what):
    try:
        return [float(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"bad {what} list {text!r}") from None


def run_command(args) -> int:
    cfg = resolve_config(args)
    if args.command == "train":
        _emit(train(cfg).to_csv(include_time=args.include_time), args.out)
    elif args.command == "memreport":
        _emit(memory_report(cfg).to_csv(), args.out)
    elif args.command == "sweep":
        levels = args.levels.split(",") if args.levels else None
        for lv in levels or []:
            if lv not in LEVELS:
                raise ConfigError(f"unknown level {lv!r}")
        rows = run_bits_sweep(cfg, _floats(args.bits_list, "bits"), levels, args.trials)
        _emit(sweep_csv(rows), args.out)
    elif args.command == "profile-variance":
        run = make_run(cfg)
        adapt(run, args.adapt_steps)
        x = run.reshape(run.data.x_train)
        report = decompose_variance(run.executor, run.loss, x, run.data.y_train, cfg.batch_size,
                                    args.trials, args.sampling_batches, seed=cfg.seed)
        names = [f"{i}:{layer.kind}" for i, layer in enumerate(run.executor.layers)]
        _emit(report.to_csv(names), args.out)
    elif args.command == "heterogeneity":
        run = make_run(cfg)
        n = min(cfg.batch_size, len(run.data.x_train))
        rep = heterogeneity_report(run.executor, run.loss, run.reshape(run.data.x_train[:n]),
                                   run.data.y_train[:n])
        tables = heterogeneity_csv(rep)
        if args.out:
            stem, ext = os.path.splitext(args.out)
            for key, text in tables.items():
                _emit(text, f"{stem}_{key}{ext or '.csv'}")
        else:
            sys.stdout.write("\n".join(tables.values()))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
