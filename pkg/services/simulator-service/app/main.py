"""Command-line entry point for the cascade serving simulator.

Subcommands:
    run    Simulate one experiment config
    sweep  Run a grid of configs (--vary field=v1,v2,...) and write sweep.csv
    plot   Render threshold / violation / quality charts from intervals.csv

Exit status: 0 on success, 1 if a run (or any sweep point) failed, 2 on usage
errors.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

from .config import settings
from .core.config_loader import load_experiment_config
from .core.plotting import plot_run
from .core.runner import parse_vary, run_experiment, summary_line, sweep
from .models import PolicyKind, SimulatorError
from .utils.logging_utils import format_exception_for_cli, log_exception_json, setup_logging

logger = logging.getLogger(__name__)

# CLI flag -> ExperimentConfig field
OVERRIDE_FLAGS = {
    "seed": "seed",
    "policy": "policy",
    "trace": "trace_path",
    "servers": "servers",
    "out": "output_dir",
    "overprovision_lambda": "overprovision_lambda",
    "cascade": "cascade",
}


def _add_config_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("config", type=Path, help="Experiment YAML file")
    parser.add_argument("--seed", type=int, help="Override the RNG seed")
    parser.add_argument("--policy", choices=[k.value for k in PolicyKind], help="Override the serving policy")
    parser.add_argument("--trace", type=Path, help="Override the trace file")
    parser.add_argument("--servers", type=int, help="Override the server count S")
    parser.add_argument("--out", type=Path, help="Override the output directory")
    parser.add_argument("--lambda", dest="overprovision_lambda", type=float, help="Override the over-provisioning factor")
    parser.add_argument("--cascade", help="Override the cascade name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cascade-sim",
        description="Trace-driven simulator for a light/heavy diffusion-model serving cascade",
    )
    parser.add_argument("--log-level", default=settings.log_level, help="Log level (default from LOG_LEVEL)")
    parser.add_argument(
        "--log-format", choices=["text", "json"], default=settings.log_format, help="Log line format"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)

    run_parser = subparsers.add_parser("run", help="Simulate one experiment")
    _add_config_arguments(run_parser)
    run_parser.add_argument("--plots", action="store_true", help="Also write SVG charts")

    sweep_parser = subparsers.add_parser("sweep", help="Run a grid of experiments")
    _add_config_arguments(sweep_parser)
    sweep_parser.add_argument(
        "--vary", action="append", default=[], metavar="FIELD=V1,V2", help="Grid axis (repeatable)"
    )
    sweep_parser.add_argument("--jobs", type=int, default=1, help="Parallel worker processes")
    sweep_parser.add_argument(
        "--seed-mode", choices=["common", "derived"], default="derived", help="Seed per sweep point"
    )

    plot_parser = subparsers.add_parser("plot", help="Render charts from a run's intervals.csv")
    plot_parser.add_argument("intervals", type=Path, help="Path to intervals.csv")
    plot_parser.add_argument("--out", type=Path, help="Output directory (defaults to the CSV's directory)")

    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    values = {field: getattr(args, flag) for flag, field in OVERRIDE_FLAGS.items() if getattr(args, flag) is not None}
    if getattr(args, "plots", False):
        values["write_plots"] = True
    return {k: str(v) if isinstance(v, Path) else v for k, v in values.items()}


def _run(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config, _overrides(args))
    summary = run_experiment(config)
    print(summary_line(summary))
    return 0


def _sweep(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    if not args.vary:
        parser.error("sweep needs at least one --vary FIELD=V1,V2")
    if args.jobs < 1:
        parser.error("--jobs must be at least 1")
    grid = parse_vary(args.vary)
    config = load_experiment_config(args.config, _overrides(args))
    table, failures = sweep(config, grid, jobs=args.jobs, seed_mode=args.seed_mode)
    print(f"{config.name}: {len(table)} points, {failures} failed -> {Path(config.output_dir) / 'sweep.csv'}")
    return 1 if failures else 0


def _plot(args: argparse.Namespace) -> int:
    written = plot_run(args.intervals, args.out)
    for path in written:
        print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level, args.log_format)

    try:
        if args.command == "run":
            return _run(args)
        if args.command == "sweep":
            return _sweep(args, parser)
        return _plot(args)
    except SimulatorError as e:
        log_exception_json(
            logger,
            f"{args.command} failed",
            e,
            severity="ERROR",
            module=e.module,
            field=e.field,
            service=settings.service_name,
        )
        print(f"error: {format_exception_for_cli(e)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
