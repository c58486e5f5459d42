"""Command-line interface orchestrating the pipeline stages.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime failure.
The FOOTPRINT_UQ_THREADS environment variable caps the --jobs worker count.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import pipeline
from .config import ConfigError, load_config
from .domain import FormatError, ValidationError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(1)


def _effective_jobs(jobs: int) -> int:
    cap = os.environ.get("FOOTPRINT_UQ_THREADS")
    if cap:
        try:
            jobs = min(jobs, max(1, int(cap)))
        except ValueError:
            raise ValidationError(f"FOOTPRINT_UQ_THREADS must be an integer, got {cap!r}")
    return max(1, jobs)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="footprint-uq",
                     description="Particle-dispersion footprint emulation with "
                                 "ensemble uncertainty quantification")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, jobs=False, seed=False, ckpts=False, n=False):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="pipeline config JSON")
        p.add_argument("--out", required=True, help="run directory")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="worker processes")
        if seed:
            p.add_argument("--seed", type=int, required=True, help="model init seed")
        if ckpts:
            p.add_argument("--ckpts", nargs="+", default=None,
                           help="checkpoint files (default: the config's seeds)")
        if n:
            p.add_argument("--n", type=int, default=None, help="timing repetitions")
        return p

    add("gen-met", "generate the synthetic meteorology file")
    add("gen-data", "simulate footprints and extract features", jobs=True)
    add("train", "train one ensemble member", seed=True)
    add("ensemble", "run the ensemble over the test split", ckpts=True)
    add("molefrac", "convolve footprints with the flux fields")
    add("analyze", "emit metric/aggregation CSV and JSON products")
    rep = sub.add_parser("report", help="collate the run report")
    rep.add_argument("--out", required=True, help="run directory")
    add("bench", "time the oracle against the emulator", n=True)
    add("reproduce", "run the full pipeline end to end", jobs=True)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    if args.command == "report":
        pipeline.stage_report(out)
        return 0
    cfg = load_config(args.config)
    if args.command == "gen-met":
        pipeline.stage_gen_met(cfg, out)
    elif args.command == "gen-data":
        pipeline.stage_gen_data(cfg, out, jobs=_effective_jobs(args.jobs))
    elif args.command == "train":
        pipeline.stage_train_one(cfg, out, args.seed)
    elif args.command == "ensemble":
        ckpts = [Path(p) for p in args.ckpts] if args.ckpts else None
        pipeline.stage_ensemble(cfg, out, ckpts)
    elif args.command == "molefrac":
        pipeline.stage_molefrac(cfg, out)
    elif args.command == "analyze":
        pipeline.stage_analyze(cfg, out)
    elif args.command == "bench":
        result = pipeline.stage_bench(cfg, out, args.n)
        print(f"oracle {result['oracle_s']:.4f} s, emulator {result['emulator_s']:.4f} s, "
              f"ratio {result['ratio']:.1f}x")
    elif args.command == "reproduce":
        pipeline.stage_reproduce(cfg, out, jobs=_effective_jobs(args.jobs))
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (ValidationError, ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
