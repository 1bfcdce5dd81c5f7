"""Command-line entry point: ``generate``, ``run``, ``table`` and ``list-algos``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import (
    ALGORITHMS,
    ConfigError,
    ExperimentConfig,
    generate_dataset,
    load_config,
    load_dataset,
    run_experiment,
    save_dataset,
)
from .tables import TABLES, reproduce_table


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    if getattr(args, "runs", None) is not None:
        cfg.run.n_runs = args.runs
    if getattr(args, "out", None):
        cfg.output.dir = args.out
    if getattr(args, "workers", None):
        cfg.run.workers = args.workers
    return cfg.validate()


def _u64(s: str) -> int:
    v = int(s)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smcmc", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    g = sub.add_parser("generate", help="simulate and save a dataset")
    g.add_argument("--config", required=True)
    g.add_argument("--seed", type=_u64)
    g.add_argument("--out")

    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=_u64)
    r.add_argument("--runs", type=int)
    r.add_argument("--out")
    r.add_argument("--workers", type=int)
    r.add_argument("--data", help="dataset CSV written by 'generate' (default: simulate from the config)")

    t = sub.add_parser("table", help="reproduce a benchmark table at reduced scale")
    t.add_argument("table", choices=sorted(TABLES))
    t.add_argument("--scale", type=float, default=1.0, help="runs per cell; 0 is a dry run")
    t.add_argument("--seed", type=_u64, default=0)
    t.add_argument("--out", default="results")
    t.add_argument("--dims", help="comma-separated subset of the table's dimensions")
    t.add_argument("--T", type=int, default=10)
    t.add_argument("--workers", type=int, default=1)

    sub.add_parser("list-algos", help="list algorithm names")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.verb == "list-algos":
            for name, desc in ALGORITHMS.items():
                print(f"{name:18s} {desc}")
            return 0
        if args.verb == "table":
            dims = [int(x) for x in args.dims.split(",")] if args.dims else None
            path = reproduce_table(args.table, args.scale, args.out, args.seed, dims, args.T, args.workers)
            print(path)
            return 0
        cfg = _apply_overrides(load_config(args.config), args)
        if args.verb == "generate":
            ds = generate_dataset(cfg)
            path = Path(cfg.output.dir) / "dataset.csv"
            save_dataset(ds, path)
            print(path)
            return 0
        ds = load_dataset(args.data) if args.data else None
        results = run_experiment(cfg, dataset=ds)
        failed = sum(r.failure is not None for r in results)
        print(f"{len(results) - failed}/{len(results)} runs completed; results in {cfg.output.dir}")
        return 1 if failed else 0
    except (ConfigError, FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
