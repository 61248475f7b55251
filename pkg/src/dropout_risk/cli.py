"""Command-line entry point: ``dropout-risk <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config, parse_overrides
from .datamodel import ConfigError, SchemaError
from .dspp import ConditioningError, DivergenceError
from .pipeline import STAGES, DependencyError, Run, run_all, run_stage
from .preprocess import EmptyBinsError

EXIT_DEPENDENCY = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dropout-risk",
                                description="Weather-conditioned dropout risk pipeline.")
    p.add_argument("subcommand", choices=[*STAGES, "all"])
    p.add_argument("--config", help="TOML config file (default: bundled synthetic config)")
    p.add_argument("--state", action="append", help="restrict per-state stages to this state (repeatable)")
    p.add_argument("--seed", type=int, help="root seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for per-state stages")
    p.add_argument("--threshold", type=float, action="append",
                   help="trigger threshold in (0, 1) (repeatable; replaces the configured list)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. dspp.epochs=50")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = parse_overrides(args.set)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.out is not None:
            overrides["out"] = args.out
        if args.jobs is not None:
            overrides["jobs"] = args.jobs
        if args.threshold:
            overrides.setdefault("triggers", {})["thresholds"] = list(args.threshold)
        cfg = load_config(args.config, overrides)
        run = Run.create(cfg)
        if args.subcommand == "all":
            run_all(run, args.state, cfg.jobs)
        else:
            run_stage(run, args.subcommand, args.state, cfg.jobs)
    except DependencyError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigError, SchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EmptyBinsError, DivergenceError, ConditioningError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
