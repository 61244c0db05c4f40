"""``contin-dt`` command line: generate datasets, train methods, compare runs."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import METHODS, RunConfig, load_config
from .dt_core import ConfigError
from .numerics import NumericError
from .report import cmd_report
from .runner import generate, load_datasets, train_run, write_run
from .tasks import OfflineDataset

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4

log = logging.getLogger("contin_dt")


def max_jobs() -> int:
    raw = os.environ.get("CONTIN_DT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"CONTIN_DT_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("CONTIN_DT_THREADS must be >= 1")
    return n


def train_one(cfg: RunConfig, seed: int) -> tuple[int, str, str | None]:
    result = train_run(cfg, seed)
    path = write_run(result)
    return seed, str(path), result.failed


def cmd_train(cfg: RunConfig) -> int:
    load_datasets(cfg)  # fail fast before spawning jobs
    jobs = min(max_jobs(), len(cfg.seeds))
    if jobs == 1:
        outcomes = [train_one(cfg, s) for s in cfg.seeds]
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(train_one, [cfg] * len(cfg.seeds), cfg.seeds))
    status = EXIT_OK
    for seed, path, failed in outcomes:
        if failed:
            print(f"seed {seed}: FAILED ({failed}) -> {path}")
            status = EXIT_NUMERIC
        else:
            print(f"seed {seed}: complete -> {path}")
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contin-dt", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write one offline dataset per task")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out-dir")

    train = sub.add_parser("train", help="train a method over the task sequence")
    train.add_argument("--config", required=True)
    train.add_argument("--method", choices=METHODS)
    train.add_argument("--seed", type=int, action="append", help="repeatable; defaults to the config's seeds")
    train.add_argument("--out-dir")

    rep = sub.add_parser("report", help="aggregate run directories")
    rep.add_argument("dirs", nargs="+")
    rep.add_argument("--out", help="also write metrics.csv, memory.csv and summary.txt here")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "generate":
            cfg = load_config(args.config, out_dir=args.out_dir)
            for path in generate(cfg):
                print(f"{path}: {OfflineDataset.load(path).n_transitions} transitions")
            return EXIT_OK
        if args.command == "train":
            seeds = tuple(args.seed) if args.seed else None
            cfg = load_config(args.config, method=args.method, seeds=seeds, out_dir=args.out_dir)
            return cmd_train(cfg)
        summary = cmd_report(args.dirs, args.out)
        print(summary.text(), end="")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, ArithmeticError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
