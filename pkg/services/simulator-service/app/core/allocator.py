"""Resource allocation for the light/heavy cascade.

Finds the plan (x1, x2, b1, b2, t) that maximizes the confidence threshold t
subject to:
- Latency:     e1(b1) + q1 + e2(b2) + q2 <= L
- Light stage: x1 * T1(b1) >= lambda * D
- Heavy stage: x2 * T2(b2) >= lambda * D * f(t)
- Servers:     x1 + x2 <= S

The search is exact: thresholds are scanned from the top of the grid, every
profiled (b1, b2) pair is tried, and x1/x2 are the smallest server counts that
meet the throughput constraints. The first threshold with a feasible pair wins.

With light_batch_wait set, q1 is at least e1(b1): batches form greedily, so a
query that arrives while its worker is busy waits for the batch in flight.

Candidate order within one threshold:
1. Fewest servers (x1 + x2)
2. Largest b1, then largest b2
3. Fewest light servers (x1)
"""

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field, replace

from ..config import settings
from ..models import QueueModel
from .profiles import CascadeProfile, DeferralCurve, DomainError, ModelProfile

logger = logging.getLogger(__name__)

# Relative slack on capacity >= demand so that e.g. 10 * 0.3 counts as 3
CAPACITY_REL_TOL = 1e-9
LATENCY_ABS_TOL = 1e-9


def threshold_grid(step: float = 0.01) -> tuple[float, ...]:
    """Thresholds 0, step, 2*step, ..., 1.0 rounded to 6 decimals."""
    if not 0.0 < step <= 1.0:
        raise DomainError(f"Threshold step {step} outside (0, 1]")
    count = int(round(1.0 / step))
    grid = [round(k * step, 6) for k in range(count + 1) if k * step <= 1.0 + 1e-9]
    if grid[-1] != 1.0:
        grid.append(1.0)
    return tuple(grid)


DEFAULT_THRESHOLD_GRID = threshold_grid(0.01)


@dataclass(frozen=True)
class QueueState:
    """Aggregate queue of one model variant as seen by the controller."""

    # Time-averaged over the last control interval
    queue_length: float = 0.0
    arrival_rate: float = 0.0


@dataclass(frozen=True)
class AllocationProblem:
    """Inputs to one allocation decision."""

    demand: float
    total_servers: int
    cascade: CascadeProfile
    overprovision_lambda: float = 1.05
    threshold_grid: tuple[float, ...] = DEFAULT_THRESHOLD_GRID
    light_queue: QueueState = field(default_factory=QueueState)
    heavy_queue: QueueState = field(default_factory=QueueState)
    # Snapshot of the online curve; None uses the cascade's profiled curve
    deferral: DeferralCurve | None = None
    # Pins the t dimension (static-threshold ablation)
    fixed_threshold: float | None = None
    queue_model: QueueModel = QueueModel.LITTLES_LAW
    stalled_queue_delay: float = settings.stalled_queue_delay_seconds
    # q1 >= e1(b1)
    light_batch_wait: bool = False

    def __post_init__(self) -> None:
        if self.demand < 0 or math.isnan(self.demand):
            raise DomainError(f"Demand must be non-negative, got {self.demand}")
        if self.total_servers < 1:
            raise DomainError(f"Need at least one server, got {self.total_servers}")
        if self.overprovision_lambda < 1.0:
            raise DomainError(f"Over-provisioning factor must be >= 1, got {self.overprovision_lambda}")

        grid = self.threshold_grid
        if not grid or grid[0] != 0.0:
            raise DomainError("Threshold grid must start at 0")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise DomainError("Threshold grid must be strictly increasing")
        if grid[-1] > 1.0:
            raise DomainError("Threshold grid must lie in [0, 1]")
        if self.fixed_threshold is not None and not any(
            math.isclose(self.fixed_threshold, g, abs_tol=1e-9) for g in grid
        ):
            raise DomainError(f"Pinned threshold {self.fixed_threshold} is not on the grid")

    @property
    def curve(self) -> DeferralCurve:
        return self.deferral if self.deferral is not None else self.cascade.deferral

    @property
    def effective_demand(self) -> float:
        """lambda * D, the demand the throughput constraints must cover."""
        return self.overprovision_lambda * self.demand


@dataclass(frozen=True)
class AllocationPlan:
    """Server counts, batch sizes and threshold chosen for one interval."""

    x1: int
    x2: int
    b1: int
    b2: int
    t: float
    feasible: bool
    demand: float = 0.0  # D the plan was solved for

    @property
    def servers_used(self) -> int:
        return self.x1 + self.x2

    def describe(self) -> str:
        flag = "" if self.feasible else " INFEASIBLE"
        return f"t={self.t:.2f} x1={self.x1} x2={self.x2} b1={self.b1} b2={self.b2}{flag}"


def queuing_delay(
    queue_length: float,
    arrival_rate: float,
    stalled_delay: float = settings.stalled_queue_delay_seconds,
) -> float:
    """
    Little's law wait estimate W = L_q / lambda_arr.

    Returns 0 for an empty queue and stalled_delay for a non-empty queue that
    receives no arrivals.

    Raises:
        DomainError: Negative queue length or arrival rate
    """
    if queue_length < 0 or arrival_rate < 0:
        raise DomainError(f"Queue length {queue_length} and arrival rate {arrival_rate} must be non-negative")
    if queue_length == 0:
        return 0.0
    if arrival_rate == 0:
        return stalled_delay
    return queue_length / arrival_rate


def _stage_delay(model: ModelProfile, b: int, queue: QueueState, problem: AllocationProblem) -> float:
    if problem.queue_model == QueueModel.TWICE_EXEC:
        return 2.0 * model.exec_latency(b)
    return queuing_delay(queue.queue_length, queue.arrival_rate, problem.stalled_queue_delay)


def _cascade_latency(b1: int, b2: int, problem: AllocationProblem) -> float:
    cascade = problem.cascade
    e1 = cascade.light.exec_latency(b1)
    q1 = _stage_delay(cascade.light, b1, problem.light_queue, problem)
    if problem.light_batch_wait:
        q1 = max(q1, e1)
    return e1 + q1 + cascade.heavy.exec_latency(b2) + _stage_delay(cascade.heavy, b2, problem.heavy_queue, problem)


def _covers(capacity: float, need: float) -> bool:
    return capacity >= need - CAPACITY_REL_TOL * max(1.0, need)


def _min_servers(need: float, per_server: float) -> int:
    """Smallest x with _covers(x * per_server, need)."""
    if _covers(0.0, need):
        return 0
    x = max(1, math.ceil(need / per_server))
    while x > 1 and _covers((x - 1) * per_server, need):
        x -= 1
    while not _covers(x * per_server, need):
        x += 1
    return x


def latency_feasible(plan: AllocationPlan, problem: AllocationProblem) -> bool:
    """True iff e1(b1) + q1 + e2(b2) + q2 <= L."""
    return _cascade_latency(plan.b1, plan.b2, problem) <= problem.cascade.slo_seconds + LATENCY_ABS_TOL


def throughput_feasible(plan: AllocationPlan, problem: AllocationProblem) -> bool:
    """True iff both stages cover lambda * D (heavy scaled by f(t)) within S servers."""
    cascade = problem.cascade
    need = problem.effective_demand
    return (
        _covers(plan.x1 * cascade.light.throughput(plan.b1), need)
        and _covers(plan.x2 * cascade.heavy.throughput(plan.b2), need * problem.curve.deferral_fraction(plan.t))
        and plan.x1 + plan.x2 <= problem.total_servers
    )


def _candidate_thresholds(problem: AllocationProblem) -> list[tuple[float, float]]:
    """(t, f(t)) pairs to scan, highest t first."""
    if problem.fixed_threshold is not None:
        t = min(problem.threshold_grid, key=lambda g: abs(g - problem.fixed_threshold))
        return [(t, problem.curve.deferral_fraction(t))]
    fractions = problem.curve.fractions_on_grid(problem.threshold_grid)
    return [(t, float(f)) for t, f in zip(reversed(problem.threshold_grid), reversed(fractions))]


def _best_effort(problem: AllocationProblem, t: float) -> AllocationPlan:
    """
    Plan used when no threshold is feasible.

    Restricted to batch pairs whose execution alone fits the SLO (all pairs if
    none do), it minimizes the light-stage throughput deficit, then the heavy
    one, then prefers larger batches.
    """
    cascade = problem.cascade
    S = problem.total_servers
    need = problem.effective_demand
    deferred = need * problem.curve.deferral_fraction(t)

    pairs = [(b1, b2) for b1 in cascade.light.batch_sizes for b2 in cascade.heavy.batch_sizes]
    fitting = [
        (b1, b2)
        for b1, b2 in pairs
        if cascade.light.exec_latency(b1) + cascade.heavy.exec_latency(b2) <= cascade.slo_seconds
    ]

    best_key: tuple[float, float, int, int] | None = None
    best: AllocationPlan | None = None
    for b1, b2 in fitting or pairs:
        T1, T2 = cascade.light.throughput(b1), cascade.heavy.throughput(b2)
        x1 = min(S, max(1, _min_servers(need, T1)))
        x2 = 0 if deferred <= 0 else min(S - x1, _min_servers(deferred, T2))
        key = (max(0.0, need - x1 * T1), max(0.0, deferred - x2 * T2), -b1, -b2)
        if best_key is None or key < best_key:
            best_key = key
            best = AllocationPlan(x1=x1, x2=x2, b1=b1, b2=b2, t=t, feasible=False, demand=problem.demand)
    assert best is not None
    return best


def solve(problem: AllocationProblem) -> AllocationPlan:
    """
    Maximize the threshold subject to latency and throughput constraints.

    Args:
        problem: Demand, cluster size, profiles, curve and queue state

    Returns:
        Feasible plan with the largest grid t, or a best-effort plan with
        feasible=False (at t=0, or at the pinned threshold)
    """
    cascade = problem.cascade
    S = problem.total_servers
    need = problem.effective_demand

    pairs = [
        (b1, b2)
        for b1 in cascade.light.batch_sizes
        for b2 in cascade.heavy.batch_sizes
        if _cascade_latency(b1, b2, problem) <= cascade.slo_seconds + LATENCY_ABS_TOL
    ]
    light_servers = {b1: max(1, _min_servers(need, cascade.light.throughput(b1))) for b1, _ in pairs}

    if pairs:
        for t, f in _candidate_thresholds(problem):
            deferred = need * f
            best_key: tuple[int, int, int, int] | None = None
            for b1, b2 in pairs:
                x1 = light_servers[b1]
                x2 = _min_servers(deferred, cascade.heavy.throughput(b2))
                if x1 + x2 > S:
                    continue
                key = (x1 + x2, -b1, -b2, x1)
                if best_key is None or key < best_key:
                    best_key = key
            if best_key is not None:
                total, neg_b1, neg_b2, x1 = best_key
                return AllocationPlan(
                    x1=x1, x2=total - x1, b1=-neg_b1, b2=-neg_b2, t=t, feasible=True, demand=problem.demand
                )

    fallback_t = problem.fixed_threshold if problem.fixed_threshold is not None else 0.0
    return _best_effort(problem, fallback_t)


def solve_static_peak(problem: AllocationProblem, peak_demand: float) -> AllocationPlan:
    """Solve once at peak demand with empty queues; the caller freezes the result."""
    peak_problem = replace(
        problem, demand=peak_demand, light_queue=QueueState(), heavy_queue=QueueState()
    )
    plan = solve(peak_problem)
    logger.info(f"Static plan at peak demand {peak_demand:.2f} qps: {plan.describe()}")
    return plan


def solve_single_model(problem: AllocationProblem, heavy: bool) -> AllocationPlan:
    """
    Host one model variant on every server and pick its batch size.

    Feasible batch sizes satisfy e(b) + q <= L and S * T(b) >= lambda * D;
    the largest feasible one wins. If none is feasible the batch size with the
    most throughput among those whose execution fits the SLO is used.
    """
    cascade = problem.cascade
    model = cascade.heavy if heavy else cascade.light
    queue = problem.heavy_queue if heavy else problem.light_queue
    S = problem.total_servers
    need = problem.effective_demand

    feasible = [
        b
        for b in model.batch_sizes
        if model.exec_latency(b) + _stage_delay(model, b, queue, problem) <= cascade.slo_seconds + LATENCY_ABS_TOL
        and _covers(S * model.throughput(b), need)
    ]
    if feasible:
        b, ok = max(feasible), True
    else:
        fitting = [b for b in model.batch_sizes if model.exec_latency(b) <= cascade.slo_seconds] or list(
            model.batch_sizes
        )
        b, ok = max(fitting, key=lambda size: (model.throughput(size), size)), False

    t = 1.0 if heavy else 0.0
    if heavy:
        # x1 = 0 is the only plan shape without a light stage
        return AllocationPlan(x1=0, x2=S, b1=cascade.light.batch_sizes[0], b2=b, t=t, feasible=ok, demand=problem.demand)
    return AllocationPlan(x1=S, x2=0, b1=b, b2=cascade.heavy.batch_sizes[0], t=t, feasible=ok, demand=problem.demand)


def solve_random_split(problem: AllocationProblem, heavy_share: float = 0.5) -> AllocationPlan:
    """
    Allocation for query-agnostic random routing over both variants.

    Each variant must cover its share of lambda * D and meet the SLO on its
    own path. Both are hosted only when both shares fit; otherwise every
    server hosts the light model.
    """
    if not 0.0 < heavy_share < 1.0:
        raise DomainError(f"Heavy share {heavy_share} outside (0, 1)")

    cascade = problem.cascade
    S = problem.total_servers
    need = problem.effective_demand
    slo = cascade.slo_seconds + LATENCY_ABS_TOL

    light_sizes = [
        b
        for b in cascade.light.batch_sizes
        if cascade.light.exec_latency(b) + _stage_delay(cascade.light, b, problem.light_queue, problem) <= slo
    ]
    heavy_sizes = [
        b
        for b in cascade.heavy.batch_sizes
        if cascade.heavy.exec_latency(b) + _stage_delay(cascade.heavy, b, problem.heavy_queue, problem) <= slo
    ]

    best_key: tuple[int, int, int, int] | None = None
    for b1 in light_sizes:
        x1 = max(1, _min_servers(need * (1.0 - heavy_share), cascade.light.throughput(b1)))
        for b2 in heavy_sizes:
            x2 = max(1, _min_servers(need * heavy_share, cascade.heavy.throughput(b2)))
            if x1 + x2 > S:
                continue
            key = (x1 + x2, -b1, -b2, x1)
            if best_key is None or key < best_key:
                best_key = key

    if best_key is None:
        return solve_single_model(problem, heavy=False)

    total, neg_b1, neg_b2, x1 = best_key
    # No discriminator: the plan's threshold is unused
    return AllocationPlan(x1=x1, x2=total - x1, b1=-neg_b1, b2=-neg_b2, t=0.0, feasible=True, demand=problem.demand)


def hosted_counts(plan: AllocationPlan, total_servers: int) -> tuple[int, int]:
    """
    Light and heavy worker counts that realize a plan on all S servers.

    Servers the plan leaves unused join the heavy pool when the plan defers
    anything (x2 > 0), otherwise the light pool.
    """
    spare = total_servers - plan.x1 - plan.x2
    if spare < 0:
        raise DomainError(f"Plan uses {plan.x1 + plan.x2} servers but only {total_servers} exist")
    if plan.x2 > 0:
        return plan.x1, plan.x2 + spare
    return plan.x1 + spare, 0


def timed_solve(
    solver: Callable[[AllocationProblem], AllocationPlan],
    problem: AllocationProblem,
    interval: int | None = None,
) -> tuple[AllocationPlan, float]:
    """
    Run a solver and emit the one-line decision log.

    Returns:
        (plan, wall-clock microseconds)
    """
    started = time.perf_counter()
    plan = solver(problem)
    elapsed_us = (time.perf_counter() - started) * 1e6
    logger.debug(
        f"allocation interval={interval} D={problem.demand:.3f} {plan.describe()} solve_us={elapsed_us:.0f}"
    )
    return plan, elapsed_us
