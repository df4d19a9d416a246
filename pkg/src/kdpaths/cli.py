"""Command line interface: pretrain, run, grid, inspect, report."""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import models, report, runner
from .config import parse_config


def _add_common(sub):
    sub.add_argument("--config", required=True, help="JSON run description")
    sub.add_argument("--out", help="output directory (overrides config)")
    sub.add_argument("--seed", type=int, help="run seed (overrides config)")
    sub.add_argument("--csv-header", action="store_true",
                     help="skip one header line in CSV datasets")
    sub.add_argument("--unsafe-alpha", action="store_true",
                     help="allow alpha outside [0, 1] with a warning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kdpaths",
        description="Train students under multiple distillation paths.")
    subs = parser.add_subparsers(dest="verb", required=True)

    _add_common(subs.add_parser("pretrain", help="train and save the teacher"))
    _add_common(subs.add_parser("run", help="execute one training run"))
    grid = subs.add_parser("grid", help="execute a strategy-by-seed grid")
    _add_common(grid)
    grid.add_argument("--jobs", type=int, default=1,
                      help="run up to N grid arms in parallel")

    inspect = subs.add_parser("inspect", help="list a checkpoint's parameters")
    inspect.add_argument("checkpoint", help="checkpoint file to describe")

    rep = subs.add_parser("report", help="render figures from a run or grid")
    rep.add_argument("directory", help="run or grid output directory")
    rep.add_argument("--out", help="directory for figures (default: in place)")
    return parser


def _load_config(args):
    with open(args.config, "r", encoding="utf-8") as fh:
        document = fh.read()
    base_dir = os.path.dirname(os.path.abspath(args.config))
    cfg = parse_config(document, base_dir=base_dir,
                       unsafe_alpha=args.unsafe_alpha)
    if args.csv_header:
        cfg.dataset.header = True
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.output_dir = args.out
    return cfg, document, base_dir


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "pretrain":
            cfg, _, _ = _load_config(args)
            path = runner.pretrain_teacher(cfg)
            print(path)
            return 0
        if args.verb == "run":
            cfg, _, _ = _load_config(args)
            if cfg.is_grid:
                raise ValueError(
                    "config declares aggregation/seed lists; use the grid verb")
            return runner.run_experiment(cfg)
        if args.verb == "grid":
            cfg, document, base_dir = _load_config(args)
            if not cfg.is_grid:
                raise ValueError(
                    "config declares a single run; use the run verb")
            return runner.run_experiment(
                cfg, jobs=args.jobs, document=document, base_dir=base_dir,
                unsafe_alpha=args.unsafe_alpha, csv_header=args.csv_header)
        if args.verb == "inspect":
            params = models.load_checkpoint(args.checkpoint)
            total = 0
            for name, value in params.items():
                print(f"{name} {tuple(value.shape)}")
                total += value.size
            print(f"total parameters: {total}")
            return 0
        if args.verb == "report":
            for path in report.render(args.directory, args.out):
                print(path)
            return 0
        raise ValueError(f"unknown verb {args.verb!r}")
    except BrokenPipeError:
        return 1
    except Exception as err:  # single-line machine-readable failure
        print(json.dumps({"error": type(err).__name__, "message": str(err)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
