"""Command-line interface.

    lrm run      --config exp.toml [--seed N] [--jobs J] [--out DIR] [--force]
                 [--records N]
    lrm compare  --config exp.toml ...
    lrm wapt     --config exp.toml ...
    lrm validate --config exp.toml [--seed N] [--out DIR] [--force]

The output root is --out, else $LRM_OUT_DIR, else ./runs.  Exit codes:
0 success, 1 validation failure, 2 config/schedule rejection, 3 sampler
failure, 4 output directory exists.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .config import ConfigError, load_config
from .manifest import OUT_ENV


def _add_common(p: argparse.ArgumentParser, jobs: bool = True):
    p.add_argument("--config", required=True, help="TOML or JSON experiment file")
    p.add_argument("--seed", type=int, default=None,
                   help="base seed (default: run.seed from the config)")
    p.add_argument("--out", default=None,
                   help=f"output root (default: ${OUT_ENV} or ./runs)")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing run directory")
    if jobs:
        p.add_argument("--jobs", type=int, default=1,
                       help="worker processes (replicas split on block "
                            "boundaries; output is byte-identical)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lrm",
        description="Langevin-type stochastic-approximation sampling runs "
                    "and their verification artifacts")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="ensemble run with checkpoint metrics")
    _add_common(p)
    p.add_argument("--records", type=int, default=None,
                   help="per-replica step-record CSVs to write "
                        "(default: run.record_replicas)")

    p = sub.add_parser("compare", help="same run across several schemes")
    _add_common(p)

    p = sub.add_parser("wapt", help="windowed deviation from the coupled flow")
    _add_common(p)

    p = sub.add_parser("validate", help="model, schedule, and noise checks")
    _add_common(p, jobs=False)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return experiments.EXIT_CONFIG
    seed = args.seed if args.seed is not None else int(cfg["run"]["seed"])
    if args.command == "run":
        return experiments.run_pipeline(cfg, seed, jobs=args.jobs,
                                        out=args.out, force=args.force,
                                        records=args.records)
    if args.command == "compare":
        return experiments.compare_pipeline(cfg, seed, jobs=args.jobs,
                                            out=args.out, force=args.force)
    if args.command == "wapt":
        return experiments.wapt_pipeline(cfg, seed, jobs=args.jobs,
                                         out=args.out, force=args.force)
    return experiments.validate_pipeline(cfg, seed, out=args.out,
                                         force=args.force)


if __name__ == "__main__":
    sys.exit(main())
