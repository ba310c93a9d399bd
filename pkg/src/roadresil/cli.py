"""Command-line entry point.

``roadresil run --config cfg.yaml`` runs every stage; each stage is also a
subcommand (``ingest``, ``conflate``, ..., ``report``) so it can be re-run on
its own. ``roadresil synth`` writes a synthetic scenario with ground truth.

Exit codes: 0 success, 2 configuration error, 3 input parse error,
4 stage computation error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from roadresil import __version__
from roadresil.ingest import ParseError
from roadresil.pipeline import STAGES, ConfigError, Pipeline, PipelineConfig, StageError
from roadresil.synth import SyntheticScenario, gen_synthetic

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_STAGE = 4

logger = logging.getLogger("roadresil")


def _stage_options(p: argparse.ArgumentParser):
    p.add_argument("--config", required=True, help="pipeline YAML config")
    p.add_argument("--workspace", help="workspace directory (overrides the config)")
    p.add_argument("--event", action="append", help="restrict to this event; repeatable")
    p.add_argument("--threshold", type=float, help="affectedness threshold in percent, must be < 0")
    p.add_argument("--gap-hours", type=int, help="largest gap merged into one window")
    p.add_argument("--lookback-days", type=int, help="baseline lookback in days")
    p.add_argument("--jobs", type=int, help="worker threads; 0 uses all cores")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="roadresil", description="Link-level road resilience to extreme weather.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ("run",):
        help_text = "run every stage in order" if name == "run" else f"run the {name} stage"
        _stage_options(sub.add_parser(name, help=help_text))

    sp = sub.add_parser("synth", help="write a synthetic scenario with ground truth")
    sp.add_argument("--workspace", required=True, help="output directory for the scenario files")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--links", type=int, default=50)
    sp.add_argument("--days", type=int, default=14)
    sp.add_argument("--noise", type=float, default=0.0, help="speed noise amplitude in mph")
    sp.add_argument("--event-type", default="Flood")
    sp.add_argument("--impact-fraction", type=float, default=1.0)
    sp.add_argument("--reports-per-link", type=float, default=3.0)
    return parser


def _config(args) -> PipelineConfig:
    return PipelineConfig.from_yaml(
        args.config,
        workspace=args.workspace,
        threshold=args.threshold,
        gap_hours=args.gap_hours,
        lookback_days=args.lookback_days,
        jobs=args.jobs,
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    if args.command == "synth":
        try:
            scenario = SyntheticScenario(
                seed=args.seed, n_links=args.links, days=args.days, noise_sigma=args.noise,
                event_type=args.event_type, impact_fraction=args.impact_fraction,
                reports_per_link=args.reports_per_link,
            )
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        paths = gen_synthetic(scenario, args.workspace)
        for key in sorted(paths):
            print(f"{key}: {paths[key]}")
        return EXIT_OK

    try:
        config = _config(args)
        pipe = Pipeline(config, args.event)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    stages = STAGES if args.command == "run" else (args.command,)
    try:
        pipe.run(stages)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return EXIT_PARSE if isinstance(exc.cause, ParseError) else EXIT_STAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for s in pipe.ran:
        print(f"{s}: done")
    for s in pipe.skipped:
        print(f"{s}: up to date")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
