"""Run accounting and the CSV logs.

Three files per run:
- intervals.csv: one row per control interval (demand, plan, outcome counts)
- queries.csv:   one row per query (lifecycle timestamps, outcome, quality)
- plans.csv:     one row per control tick (solver input and output)

Numbers are written with 6 significant digits; empty cells mean "absent".
"""

import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING

import pandas as pd

from ..models import Outcome, SimulatorError
from .allocator import AllocationPlan

if TYPE_CHECKING:
    from .cluster import QueryRecord

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6g"

INTERVAL_COLUMNS = [
    "interval",
    "interval_start",
    "interval_end",
    "demand_observed",
    "demand_estimated",
    "x1",
    "x2",
    "b1",
    "b2",
    "feasible",
    "light_workers",
    "heavy_workers",
    "threshold",
    "arrived",
    "served_light",
    "served_heavy",
    "dropped",
    "late",
    "violation_ratio",
    "mean_delivered_quality",
]

QUERY_COLUMNS = [
    "query_id",
    "arrival",
    "deadline",
    "confidence",
    "light_start",
    "light_end",
    "heavy_start",
    "heavy_end",
    "completion",
    "dropped_at",
    "outcome",
    "deferred",
    "forced_light",
    "delivered_quality",
]

PLAN_COLUMNS = [
    "tick",
    "time",
    "demand_estimated",
    "x1",
    "x2",
    "b1",
    "b2",
    "t",
    "feasible",
    "replanned",
    "light_workers",
    "heavy_workers",
    "light_queue_length",
    "light_arrival_rate",
    "heavy_queue_length",
    "heavy_arrival_rate",
    "q_light_est",
    "q_heavy_est",
    "solver_us",
]

_COMPLETED = (Outcome.SERVED_LIGHT, Outcome.SERVED_HEAVY, Outcome.LATE)


class MetricsError(SimulatorError):
    """Output files could not be written or read."""

    module = "metrics"


@dataclass(frozen=True)
class IntervalSnapshot:
    """Immutable summary of one control interval."""

    interval: int
    interval_start: float
    interval_end: float
    demand_observed: float
    demand_estimated: float
    plan: AllocationPlan
    light_workers: int
    heavy_workers: int
    arrived: int
    served_light: int
    served_heavy: int
    dropped: int
    late: int
    mean_delivered_quality: float | None

    @property
    def threshold(self) -> float:
        return self.plan.t

    @property
    def completed(self) -> int:
        return self.served_light + self.served_heavy + self.late

    @property
    def violation_ratio(self) -> float | None:
        if self.arrived == 0:
            return None
        return min(1.0, (self.late + self.dropped) / self.arrived)


@dataclass(frozen=True)
class PlanRecord:
    """Controller decision at one tick."""

    tick: int
    time: float
    demand_estimated: float
    plan: AllocationPlan
    replanned: bool
    light_workers: int
    heavy_workers: int
    light_queue_length: float
    light_arrival_rate: float
    heavy_queue_length: float
    heavy_arrival_rate: float
    q_light_est: float
    q_heavy_est: float
    solver_us: float


class MetricsCollector:
    """
    Accumulates outcomes into per-interval snapshots.

    Outcomes are attributed to the interval open when their terminal event
    happens; anything that finishes after the last tick (the drain) lands in
    the final snapshot.
    """

    def __init__(self) -> None:
        self.snapshots: list[IntervalSnapshot] = []
        self.plans: list[PlanRecord] = []
        self._open: dict | None = None
        self.total_arrived = 0

    @property
    def has_open_interval(self) -> bool:
        return self._open is not None

    def open_interval(
        self,
        index: int,
        start: float,
        demand_estimated: float,
        plan: AllocationPlan,
        light_workers: int,
        heavy_workers: int,
    ) -> None:
        if self._open is not None:
            raise MetricsError(f"Interval {self._open['interval']} is still open")
        self._open = {
            "interval": index,
            "interval_start": start,
            "demand_estimated": demand_estimated,
            "plan": plan,
            "light_workers": light_workers,
            "heavy_workers": heavy_workers,
            "arrived": 0,
            Outcome.SERVED_LIGHT: 0,
            Outcome.SERVED_HEAVY: 0,
            Outcome.DROPPED: 0,
            Outcome.LATE: 0,
            "quality_sum": 0.0,
        }

    def record_arrival(self) -> None:
        self.total_arrived += 1
        if self._open is not None:
            self._open["arrived"] += 1

    def record_outcome(self, record: "QueryRecord") -> None:
        if self._open is None or record.outcome is None:
            return
        self._open[record.outcome] += 1
        if record.outcome in _COMPLETED and record.delivered_quality is not None:
            self._open["quality_sum"] += record.delivered_quality

    def record_plan(self, plan_record: PlanRecord) -> None:
        self.plans.append(plan_record)

    def close_interval(self, end: float) -> IntervalSnapshot:
        """Freeze the open interval; observed demand is arrivals over its length."""
        if self._open is None:
            raise MetricsError("No interval is open")
        acc = self._open
        self._open = None

        length = end - acc["interval_start"]
        completed = acc[Outcome.SERVED_LIGHT] + acc[Outcome.SERVED_HEAVY] + acc[Outcome.LATE]
        snapshot = IntervalSnapshot(
            interval=acc["interval"],
            interval_start=acc["interval_start"],
            interval_end=end,
            demand_observed=acc["arrived"] / length if length > 0 else 0.0,
            demand_estimated=acc["demand_estimated"],
            plan=acc["plan"],
            light_workers=acc["light_workers"],
            heavy_workers=acc["heavy_workers"],
            arrived=acc["arrived"],
            served_light=acc[Outcome.SERVED_LIGHT],
            served_heavy=acc[Outcome.SERVED_HEAVY],
            dropped=acc[Outcome.DROPPED],
            late=acc[Outcome.LATE],
            mean_delivered_quality=acc["quality_sum"] / completed if completed else None,
        )
        self.snapshots.append(snapshot)
        return snapshot


def _in_window(record: "QueryRecord", window: tuple[float, float] | None) -> bool:
    return window is None or window[0] <= record.arrival < window[1]


def slo_violation_ratio(
    records: Iterable["QueryRecord"], window: tuple[float, float] | None = None
) -> float | None:
    """
    (late + dropped) / arrived over queries arriving in [start, end).

    Returns:
        Fraction in [0, 1], or None when nothing arrived in the window
    """
    arrived = violations = 0
    for record in records:
        if not _in_window(record, window):
            continue
        arrived += 1
        if record.outcome in (Outcome.LATE, Outcome.DROPPED):
            violations += 1
    if arrived == 0:
        return None
    return violations / arrived


def quality_aggregate(
    records: Iterable["QueryRecord"], window: tuple[float, float] | None = None
) -> float | None:
    """Mean delivered quality over completed (served or late) queries; None if none completed."""
    total = 0.0
    count = 0
    for record in records:
        if not _in_window(record, window):
            continue
        if record.outcome in _COMPLETED and record.delivered_quality is not None:
            total += record.delivered_quality
            count += 1
    if count == 0:
        return None
    return total / count


def _interval_row(s: IntervalSnapshot) -> dict:
    return {
        "interval": s.interval,
        "interval_start": s.interval_start,
        "interval_end": s.interval_end,
        "demand_observed": s.demand_observed,
        "demand_estimated": s.demand_estimated,
        "x1": s.plan.x1,
        "x2": s.plan.x2,
        "b1": s.plan.b1,
        "b2": s.plan.b2,
        "feasible": s.plan.feasible,
        "light_workers": s.light_workers,
        "heavy_workers": s.heavy_workers,
        "threshold": s.threshold,
        "arrived": s.arrived,
        "served_light": s.served_light,
        "served_heavy": s.served_heavy,
        "dropped": s.dropped,
        "late": s.late,
        "violation_ratio": s.violation_ratio,
        "mean_delivered_quality": s.mean_delivered_quality,
    }


def _query_row(r: "QueryRecord") -> dict:
    return {
        "query_id": r.query_id,
        "arrival": r.arrival,
        "deadline": r.deadline,
        "confidence": r.confidence,
        "light_start": r.light_start,
        "light_end": r.light_end,
        "heavy_start": r.heavy_start,
        "heavy_end": r.heavy_end,
        "completion": r.completion,
        "dropped_at": r.dropped_at,
        "outcome": r.outcome.value if r.outcome else None,
        "deferred": r.deferred,
        "forced_light": r.forced_light,
        "delivered_quality": r.delivered_quality,
    }


def _plan_row(p: PlanRecord, include_solver_time: bool) -> dict:
    return {
        "tick": p.tick,
        "time": p.time,
        "demand_estimated": p.demand_estimated,
        "x1": p.plan.x1,
        "x2": p.plan.x2,
        "b1": p.plan.b1,
        "b2": p.plan.b2,
        "t": p.plan.t,
        "feasible": p.plan.feasible,
        "replanned": p.replanned,
        "light_workers": p.light_workers,
        "heavy_workers": p.heavy_workers,
        "light_queue_length": p.light_queue_length,
        "light_arrival_rate": p.light_arrival_rate,
        "heavy_queue_length": p.heavy_queue_length,
        "heavy_arrival_rate": p.heavy_arrival_rate,
        "q_light_est": p.q_light_est,
        "q_heavy_est": p.q_heavy_est,
        "solver_us": p.solver_us if include_solver_time else None,
    }


def _write_frame(rows: list[dict], columns: list[str], path: Path) -> None:
    frame = pd.DataFrame(rows, columns=columns)
    try:
        frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, na_rep="", lineterminator="\n")
    except OSError as e:
        raise MetricsError(f"Cannot write {path}: {e}") from e


def write_csv(
    snapshots: Sequence[IntervalSnapshot],
    records: Sequence["QueryRecord"],
    plans: Sequence[PlanRecord],
    out_dir: Path | str,
    include_solver_time: bool = False,
) -> dict[str, Path]:
    """
    Write intervals.csv, queries.csv and plans.csv.

    Solver wall-clock is left blank unless include_solver_time is set, so
    repeated runs produce byte-identical files.

    Returns:
        Mapping of file stem to written path

    Raises:
        MetricsError: Directory or file could not be written
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise MetricsError(f"Cannot create output directory {out_dir}: {e}") from e

    paths = {
        "intervals": out_dir / "intervals.csv",
        "queries": out_dir / "queries.csv",
        "plans": out_dir / "plans.csv",
    }
    _write_frame([_interval_row(s) for s in snapshots], INTERVAL_COLUMNS, paths["intervals"])
    _write_frame([_query_row(r) for r in sorted(records, key=lambda r: r.query_id)], QUERY_COLUMNS, paths["queries"])
    _write_frame([_plan_row(p, include_solver_time) for p in plans], PLAN_COLUMNS, paths["plans"])

    logger.info(
        f"Wrote {len(snapshots)} intervals, {len(records)} queries and {len(plans)} plans to {out_dir}"
    )
    return paths


def read_csv(path: Path | str) -> pd.DataFrame:
    """Load one of the run CSVs."""
    path = Path(path)
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise MetricsError(f"Cannot read {path}: {e}") from e
