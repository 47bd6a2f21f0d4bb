"""Experiment pipeline: one run, or a sweep of runs over config fields.

run: load profiles -> load/scale trace -> generate arrivals -> simulate with
policy -> drain -> write CSVs, summary.json and optional plots.
"""

import itertools
import json
import logging
import math
import multiprocessing
import re
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

import pandas as pd

from ..models import ConfigError, ExperimentConfig, Outcome, RunSummary, SimulatorError
from .cluster import Cluster, QueryRecord
from .config_loader import parse_value, with_overrides
from .metrics import IntervalSnapshot, MetricsCollector, MetricsError, PlanRecord, quality_aggregate, slo_violation_ratio, write_csv
from .plotting import plot_run
from .policies import apply_policy
from .profiles import CascadeProfile, DeferralCurve, get_cascade, load_profiles
from .simengine import RngStreams, Simulator
from .workload import Trace, generate_arrivals, load_trace, profile_confidences, scale_trace

logger = logging.getLogger(__name__)

# Short names accepted by --vary
FIELD_ALIASES = {
    "lambda": "overprovision_lambda",
    "trace": "trace_path",
    "S": "servers",
    "interval": "control_interval_seconds",
}

PROFILING_SAMPLES = 1000


@dataclass
class SimulationResult:
    """Everything a finished simulation produced, before any file is written."""

    records: list[QueryRecord]
    snapshots: list[IntervalSnapshot]
    plans: list[PlanRecord]
    curve: DeferralCurve
    forced_light: int
    deferred: int
    light_batches: int
    heavy_batches: int
    solver_times_us: list[float]
    event_log: list[tuple[float, int, str]] = field(default_factory=list)

    def count(self, outcome: Outcome) -> int:
        return sum(1 for r in self.records if r.outcome == outcome)


def prepare_cascade(cascade: CascadeProfile, config: ExperimentConfig) -> CascadeProfile:
    """Seed an empty deferral curve from an offline profiling pass."""
    if not cascade.deferral.is_empty:
        return cascade
    profiling_model = config.outcome_model.model_copy(
        update={"seed": RngStreams(config.seed).derive_seed(f"profiling:{config.outcome_model.seed}")}
    )
    curve = DeferralCurve.from_samples(profile_confidences(profiling_model, PROFILING_SAMPLES))
    return replace(cascade, deferral=curve)


def simulate(
    config: ExperimentConfig,
    cascade: CascadeProfile,
    trace: Trace,
    record_log: bool = False,
) -> SimulationResult:
    """
    Run one simulation in memory.

    Raises:
        SimulatorError: A module failed, or the run lost or duplicated a query
    """
    streams = RngStreams(config.seed)
    cascade = prepare_cascade(cascade, config)
    arrivals = generate_arrivals(trace, streams.seed_sequence("arrivals"), config.arrival_mode)
    outcome_model = config.outcome_model.model_copy(
        update={"seed": streams.derive_seed(f"queries:{config.outcome_model.seed}")}
    )

    sim = Simulator(record_log=record_log)
    collector = MetricsCollector()
    cluster = Cluster(
        sim=sim,
        cascade=cascade,
        policy=apply_policy(config.policy, config.policy_params),
        config=config,
        trace=trace,
        outcome_model=outcome_model,
        routing_rng=streams.generator("routing"),
        collector=collector,
    )

    cluster.start(arrivals)
    sim.run_until(trace.duration_seconds)
    sim.run_until(math.inf)
    cluster.finalize()

    records = [cluster.records[i] for i in sorted(cluster.records)]
    terminal = sum(1 for r in records if r.outcome is not None)
    if len(records) != len(arrivals) or terminal != len(arrivals):
        raise SimulatorError(
            f"Conservation violated: {len(arrivals)} arrivals, {len(records)} records, {terminal} terminal"
        )
    cluster.curve.validate()

    return SimulationResult(
        records=records,
        snapshots=collector.snapshots,
        plans=collector.plans,
        curve=cluster.curve,
        forced_light=cluster.forced_light,
        deferred=cluster.deferred,
        light_batches=cluster.light_executions,
        heavy_batches=cluster.heavy_executions,
        solver_times_us=cluster.solver_times_us,
        event_log=sim.event_log,
    )


def summarize(config: ExperimentConfig, result: SimulationResult, wall_time: float, out_dir: Path) -> RunSummary:
    solver = result.solver_times_us
    return RunSummary(
        name=config.name,
        policy=config.policy,
        cascade=config.cascade,
        seed=config.seed,
        servers=config.servers,
        overprovision_lambda=config.overprovision_lambda,
        arrived=len(result.records),
        served_light=result.count(Outcome.SERVED_LIGHT),
        served_heavy=result.count(Outcome.SERVED_HEAVY),
        dropped=result.count(Outcome.DROPPED),
        late=result.count(Outcome.LATE),
        forced_light=result.forced_light,
        deferred=result.deferred,
        light_batches=result.light_batches,
        heavy_batches=result.heavy_batches,
        violation_ratio=slo_violation_ratio(result.records),
        mean_quality=quality_aggregate(result.records),
        control_ticks=len(result.plans),
        mean_solver_us=sum(solver) / len(solver) if solver else 0.0,
        max_solver_us=max(solver, default=0.0),
        wall_time_seconds=wall_time,
        output_dir=str(out_dir),
    )


def load_inputs(config: ExperimentConfig) -> tuple[CascadeProfile, Trace]:
    """Profiles and (scaled) trace named by a config."""
    config.check_paths()
    cascade = get_cascade(load_profiles(config.profiles_path), config.cascade)
    trace = load_trace(config.trace_path, config.trace_interval_seconds)
    if config.trace_min_qps is not None and config.trace_max_qps is not None:
        trace = scale_trace(trace, config.trace_min_qps, config.trace_max_qps)
    return cascade, trace


def run_experiment(config: ExperimentConfig) -> RunSummary:
    """
    Execute one run and write its outputs to config.output_dir.

    Returns:
        RunSummary (also written as summary.json)
    """
    started = time.perf_counter()
    logger.info(
        f"Run {config.name}: policy={config.policy.value} cascade={config.cascade} "
        f"S={config.servers} seed={config.seed}"
    )
    cascade, trace = load_inputs(config)
    result = simulate(config, cascade, trace)

    out_dir = Path(config.output_dir)
    paths = write_csv(result.snapshots, result.records, result.plans, out_dir, config.record_solver_time)
    if config.write_plots:
        plot_run(paths["intervals"], title=config.name)

    summary = summarize(config, result, time.perf_counter() - started, out_dir)
    try:
        (out_dir / "summary.json").write_text(summary.model_dump_json(indent=2) + "\n", encoding="utf-8")
    except OSError as e:
        raise MetricsError(f"Cannot write {out_dir / 'summary.json'}: {e}") from e

    logger.info(
        f"Run {config.name} finished: violation_ratio={_fmt(summary.violation_ratio)} "
        f"mean_quality={_fmt(summary.mean_quality)} wall_time={summary.wall_time_seconds:.2f}s"
    )
    return summary


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def summary_line(summary: RunSummary) -> str:
    """One-line result printed by the CLI."""
    return (
        f"{summary.name}: violation_ratio={_fmt(summary.violation_ratio)} "
        f"mean_quality={_fmt(summary.mean_quality)} arrived={summary.arrived} "
        f"wall_time={summary.wall_time_seconds:.2f}s"
    )


# ---------------------------------------------------------------------------
# Sweep
# ---------------------------------------------------------------------------


def parse_vary(specs: list[str]) -> dict[str, list[Any]]:
    """
    Parse repeated "field=v1,v2,..." options into an ordered grid.

    Raises:
        ConfigError: Empty grid, malformed option or empty value list
    """
    if not specs:
        raise ConfigError("Sweep needs at least one --vary field=v1,v2,...", field="vary")
    grid: dict[str, list[Any]] = {}
    for spec in specs:
        key, sep, values = spec.partition("=")
        key = FIELD_ALIASES.get(key.strip(), key.strip())
        items = [v.strip() for v in values.split(",") if v.strip()]
        if not sep or not key or not items:
            raise ConfigError(f"Malformed --vary {spec!r}; expected field=v1,v2,...", field="vary")
        grid[key] = [parse_value(v) for v in items]
    return grid


def sweep_points(grid: dict[str, list[Any]]) -> list[dict[str, Any]]:
    """Cartesian product of the grid, in option order."""
    keys = list(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def point_key(point: dict[str, Any]) -> str:
    """Directory-safe, order-independent name for a sweep point."""
    parts = [f"{k.split('.')[-1]}={point[k]}" for k in sorted(point)]
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", "__".join(parts))


def point_config(base: ExperimentConfig, point: dict[str, Any], seed_mode: str = "derived") -> ExperimentConfig:
    """
    Config for one sweep point.

    seed_mode "derived" hashes (base seed, point key) into a new seed;
    "common" keeps the base seed for every point (paired comparison). A seed
    varied by the grid itself is used as given. Either way a point's seed
    does not depend on grid order.
    """
    key = point_key(point)
    if "seed" in point or seed_mode == "common":
        seed = point.get("seed", base.seed)
    else:
        seed = RngStreams(base.seed).derive_seed(f"sweep:{key}")
    overrides = {
        **point,
        "name": f"{base.name}__{key}",
        "output_dir": str(Path(base.output_dir) / key),
        "seed": seed,
    }
    return with_overrides(base, overrides)


def _run_point(config: ExperimentConfig) -> dict[str, Any]:
    try:
        summary = run_experiment(config)
        return {"status": "ok", "error": "", **summary.model_dump(mode="json")}
    except SimulatorError as e:
        logger.warning(f"Sweep point {config.name} failed: {e}")
        return {"status": "failed", "error": f"{type(e).__name__}: {e}", "name": config.name, "output_dir": str(config.output_dir)}


def sweep(
    base: ExperimentConfig,
    grid: dict[str, list[Any]],
    jobs: int = 1,
    seed_mode: str = "derived",
) -> tuple[pd.DataFrame, int]:
    """
    Run every grid point into its own directory and write sweep.csv.

    Per-point failures are recorded in the table; the sweep carries on.

    Returns:
        (sweep table, number of failed points)
    """
    points = sweep_points(grid)
    if not points:
        raise ConfigError("Sweep grid is empty", field="vary")

    rows: list[dict[str, Any] | None] = [None] * len(points)
    runnable: list[tuple[int, ExperimentConfig]] = []
    for index, point in enumerate(points):
        try:
            runnable.append((index, point_config(base, point, seed_mode)))
        except SimulatorError as e:
            logger.warning(f"Sweep point {point_key(point)} has an invalid config: {e}")
            rows[index] = {"status": "failed", "error": f"{type(e).__name__}: {e}", "name": point_key(point)}
    logger.info(f"Sweep {base.name}: {len(points)} points, jobs={jobs}")

    configs = [config for _, config in runnable]
    if jobs > 1 and len(configs) > 1:
        with multiprocessing.Pool(processes=jobs) as pool:
            results = pool.map(_run_point, configs)
    else:
        results = [_run_point(config) for config in configs]
    for (index, _), result in zip(runnable, results):
        rows[index] = result

    table_rows: list[dict[str, Any]] = []
    for point, row in zip(points, rows):
        assert row is not None
        table_rows.append({**row, **{f"vary.{key}": value for key, value in point.items()}})

    table = pd.DataFrame(table_rows)
    out_dir = Path(base.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "sweep.csv", index=False, float_format="%.6g", na_rep="", lineterminator="\n")
    (out_dir / "sweep_grid.json").write_text(json.dumps(grid, indent=2, default=str) + "\n", encoding="utf-8")

    failures = int((table["status"] != "ok").sum())
    logger.info(f"Sweep {base.name} finished: {len(table_rows) - failures} ok, {failures} failed")
    return table, failures
