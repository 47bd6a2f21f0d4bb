"""Simulated data path and control path of the serving cluster.

Data path: a new query joins the shortest light-worker queue. Idle workers
start a batch as soon as they have work. When a light batch finishes, every
query whose confidence is below the threshold moves to the shortest
heavy-worker queue; the rest are answered with the light output.

Control path: every control interval the controller measures demand and
per-model queues, updates the EWMA demand estimate, asks the policy for a
plan, and applies it by re-hosting workers and setting batch sizes and the
threshold.
"""

import logging
from collections import deque
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from ..config import settings
from ..models import BatchBilling, ExperimentConfig, ModelRole, Outcome, QueryOutcomeModel, SimulatorError
from .allocator import (
    AllocationPlan,
    AllocationProblem,
    QueueState,
    hosted_counts,
    queuing_delay,
    threshold_grid,
    timed_solve,
)
from .metrics import MetricsCollector, PlanRecord
from .policies import ServingPolicy
from .profiles import CascadeProfile, ModelProfile
from .simengine import Event, EventKind, Simulator
from .workload import Query, Trace, ewma_estimate, sample_query

logger = logging.getLogger(__name__)


class RoutingError(SimulatorError):
    """No worker hosts the model a query must go to."""

    module = "cluster"


@dataclass
class Batch:
    """A batch executing on one worker."""

    worker_id: int
    role: ModelRole
    queries: list[Query]
    start: float
    end: float
    billed_size: int
    formation_drops: int = 0


@dataclass
class WorkerState:
    """One GPU worker: hosted model, local FIFO queue and execution state."""

    id: int
    hosted_model: ModelRole
    batch_size: int
    queue: deque[Query] = field(default_factory=deque)
    busy_until: float = 0.0
    served_count: int = 0
    deferred_count: int = 0
    # Earliest time the hosted model can run (model switch delay)
    available_at: float = 0.0
    in_flight: Batch | None = None
    start_pending: bool = False

    @property
    def queue_length(self) -> int:
        return len(self.queue)


@dataclass
class ControllerState:
    """What the controller knows between ticks."""

    control_interval: float
    current_plan: AllocationPlan | None = None
    demand_history: list[float] = field(default_factory=list)
    tick_index: int = 0
    last_tick_time: float = 0.0
    light_arrivals: int = 0  # entries into light queues since the last tick
    heavy_arrivals: int = 0  # entries into heavy queues since the last tick
    light_queue: QueueState = field(default_factory=QueueState)
    heavy_queue: QueueState = field(default_factory=QueueState)


@dataclass(slots=True)
class QueryRecord:
    """Lifecycle of one query, filled in as it moves through the cascade."""

    query_id: int
    arrival: float
    deadline: float
    confidence: float
    light_start: float | None = None
    light_end: float | None = None
    heavy_start: float | None = None
    heavy_end: float | None = None
    completion: float | None = None
    dropped_at: float | None = None
    outcome: Outcome | None = None
    deferred: bool = False
    forced_light: bool = False
    delivered_quality: float | None = None

    @property
    def light_wait(self) -> float | None:
        """Time spent queued before the light stage started."""
        if self.light_start is None:
            return None
        return self.light_start - self.arrival

    def check(self) -> None:
        """Raise ValueError if timestamps or outcome are inconsistent."""
        stamps = [
            s
            for s in (self.arrival, self.light_start, self.light_end, self.heavy_start, self.heavy_end)
            if s is not None
        ]
        if self.completion is not None:
            stamps.append(self.completion)
        if any(b < a for a, b in zip(stamps, stamps[1:])):
            raise ValueError(f"query {self.query_id}: timestamps not monotone {stamps}")
        if self.outcome is None:
            raise ValueError(f"query {self.query_id}: no terminal outcome")
        if self.outcome == Outcome.DROPPED:
            if self.completion is not None or self.delivered_quality is not None:
                raise ValueError(f"query {self.query_id}: dropped but completed")
        elif self.completion is None or self.delivered_quality is None:
            raise ValueError(f"query {self.query_id}: {self.outcome.value} without completion")
        if self.outcome == Outcome.SERVED_HEAVY and self.heavy_end is None:
            raise ValueError(f"query {self.query_id}: served heavy without heavy stage")


def route_query(workers: Sequence[WorkerState]) -> WorkerState:
    """
    Join-shortest-queue over candidate workers, ties to the lowest id.

    Raises:
        RoutingError: If there are no candidates
    """
    if not workers:
        raise RoutingError("No worker hosts the required model")
    return min(workers, key=lambda w: (w.queue_length, w.id))


class Cluster:
    """
    Workers, load balancer, sink and controller wired onto a Simulator.

    The cluster owns all mutable serving state; the metrics collector only
    receives finished records and frozen snapshots.
    """

    def __init__(
        self,
        sim: Simulator,
        cascade: CascadeProfile,
        policy: ServingPolicy,
        config: ExperimentConfig,
        trace: Trace,
        outcome_model: QueryOutcomeModel,
        routing_rng: np.random.Generator,
        collector: MetricsCollector | None = None,
    ):
        """
        Initialize the cluster with every worker hosting the light model.

        Args:
            sim: Event engine the cluster schedules onto
            cascade: Model profiles, deferral curve and SLO
            policy: Serving strategy
            config: Experiment parameters
            trace: Demand trace (bootstrap demand and run length)
            outcome_model: Query sampler parameters, seed already derived
            routing_rng: Stream for random routing decisions
            collector: Metrics sink
        """
        self.sim = sim
        self.cascade = cascade
        self.policy = policy
        self.config = config
        self.trace = trace
        self.outcome_model = outcome_model
        self.routing_rng = routing_rng
        self.collector = collector or MetricsCollector()

        self.total_servers = config.servers
        self.grid = threshold_grid(config.threshold_step)
        self.curve = cascade.deferral.copy()
        self.threshold = 0.0
        self.controller = ControllerState(control_interval=config.control_interval_seconds)
        self.workers = [
            WorkerState(id=i, hosted_model=ModelRole.LIGHT, batch_size=cascade.light.batch_sizes[0])
            for i in range(self.total_servers)
        ]

        self.records: dict[int, QueryRecord] = {}
        self.arrival_times: np.ndarray = np.empty(0)
        self.trace_ended = False
        self.forced_light = 0
        self.deferred = 0
        self.light_executions = 0
        self.heavy_executions = 0
        self.solver_times_us: list[float] = []
        # Integral of queue length over time since the last tick, per model
        self.queue_area = {ModelRole.LIGHT: 0.0, ModelRole.HEAVY: 0.0}
        self._area_since = 0.0

        sim.on(EventKind.QUERY_ARRIVAL, self._on_arrival)
        sim.on(EventKind.BATCH_START, self._on_batch_start)
        sim.on(EventKind.BATCH_COMPLETE, self._on_batch_complete)
        sim.on(EventKind.CONTROL_TICK, self._on_control_tick)
        sim.on(EventKind.TRACE_END, self._on_trace_end)

    # ------------------------------------------------------------------
    # Setup
    # ------------------------------------------------------------------

    def base_problem(self, demand: float) -> AllocationProblem:
        """Allocation problem with the controller's current queue view."""
        return AllocationProblem(
            demand=demand,
            total_servers=self.total_servers,
            cascade=self.cascade,
            overprovision_lambda=self.config.overprovision_lambda,
            threshold_grid=self.grid,
            light_queue=self.controller.light_queue,
            heavy_queue=self.controller.heavy_queue,
            deferral=self.curve.copy(),
            stalled_queue_delay=settings.stalled_queue_delay_seconds,
            light_batch_wait=True,
        )

    def start(self, arrival_times: np.ndarray) -> None:
        """Prepare the policy and schedule the first tick, first arrival and trace end."""
        self.arrival_times = arrival_times
        self.policy.prepare(self.base_problem(self.trace.rates[0]), self.trace.peak_rate)

        self.sim.schedule(0.0, EventKind.CONTROL_TICK)
        if len(arrival_times):
            self.sim.schedule(float(arrival_times[0]), EventKind.QUERY_ARRIVAL, 0)
        self.sim.schedule(self.trace.duration_seconds, EventKind.TRACE_END)

    # ------------------------------------------------------------------
    # Worker views
    # ------------------------------------------------------------------

    def workers_hosting(self, role: ModelRole) -> list[WorkerState]:
        return [w for w in self.workers if w.hosted_model == role]

    def _profile(self, role: ModelRole) -> ModelProfile:
        return self.cascade.light if role == ModelRole.LIGHT else self.cascade.heavy

    def _batch_size(self, role: ModelRole) -> int:
        plan = self.controller.current_plan
        if plan is None:
            return self._profile(role).batch_sizes[0]
        return self.policy.batch_size(role, plan)

    def _billed_size(self, role: ModelRole, configured: int, formed: int) -> int:
        if self.config.batch_billing == BatchBilling.CONFIGURED:
            return configured
        sizes = self._profile(role).batch_sizes
        return next((b for b in sizes if b >= formed), sizes[-1])

    # ------------------------------------------------------------------
    # Data path
    # ------------------------------------------------------------------

    def _enqueue(self, query: Query, role: ModelRole) -> WorkerState:
        self._accrue_queue_area(self.sim.now)
        worker = route_query(self.workers_hosting(role))
        worker.queue.append(query)
        if role == ModelRole.LIGHT:
            self.controller.light_arrivals += 1
        else:
            self.controller.heavy_arrivals += 1
        self._try_start(worker)
        return worker

    def _try_start(self, worker: WorkerState) -> None:
        if worker.start_pending or worker.in_flight is not None or not worker.queue:
            return
        worker.start_pending = True
        self.sim.schedule(max(self.sim.now, worker.available_at), EventKind.BATCH_START, worker.id)

    def _on_arrival(self, event: Event) -> None:
        index: int = event.payload
        query = sample_query(self.outcome_model, index, event.time, self.cascade.slo_seconds)
        self.records[query.id] = QueryRecord(
            query_id=query.id, arrival=query.arrival_time, deadline=query.deadline, confidence=query.confidence
        )
        self.collector.record_arrival()

        role = self.policy.entry_role(
            len(self.workers_hosting(ModelRole.LIGHT)),
            len(self.workers_hosting(ModelRole.HEAVY)),
            self.routing_rng,
        )
        self._enqueue(query, role)

        if index + 1 < len(self.arrival_times):
            self.sim.schedule(float(self.arrival_times[index + 1]), EventKind.QUERY_ARRIVAL, index + 1)

    def _would_defer(self, query: Query) -> bool:
        return (
            self.policy.uses_discriminator
            and query.confidence < self.threshold
            and bool(self.workers_hosting(ModelRole.HEAVY))
        )

    def predicted_completion(self, worker: WorkerState, query: Query, now: float) -> float:
        """now + remaining pipeline latency at the current batch sizes."""
        role = worker.hosted_model
        predicted = now + self._profile(role).exec_latency(self._batch_size(role))
        if role == ModelRole.LIGHT and self._would_defer(query):
            predicted += self.cascade.heavy.exec_latency(self._batch_size(ModelRole.HEAVY))
        return predicted

    def drop_predicted_late(self, worker: WorkerState, now: float) -> list[Query]:
        """
        Drop queued queries predicted to miss their deadline.

        Scans from the head until a full batch of keepers is found; a query
        whose predicted completion equals its deadline is kept.
        """
        kept: list[Query] = []
        dropped: list[Query] = []
        while worker.queue and len(kept) < worker.batch_size:
            query = worker.queue.popleft()
            if self.predicted_completion(worker, query, now) > query.deadline:
                dropped.append(query)
            else:
                kept.append(query)
        worker.queue.extendleft(reversed(kept))

        for query in dropped:
            record = self.records[query.id]
            record.outcome = Outcome.DROPPED
            record.dropped_at = now
            self.collector.record_outcome(record)
        return dropped

    def form_batch(self, worker: WorkerState, now: float) -> Batch | None:
        """Dequeue up to batch_size queries after drop filtering and start executing them."""
        self._accrue_queue_area(now)
        role = worker.hosted_model
        worker.batch_size = self._batch_size(role)
        dropped = self.drop_predicted_late(worker, now)
        if not worker.queue:
            if dropped:
                self.policy.on_batch_complete(role, slo_timeout=True)
            return None

        size = min(worker.batch_size, len(worker.queue))
        queries = [worker.queue.popleft() for _ in range(size)]
        billed = self._billed_size(role, worker.batch_size, size)
        end = now + self._profile(role).exec_latency(billed)

        for query in queries:
            record = self.records[query.id]
            if role == ModelRole.LIGHT:
                record.light_start = now
            else:
                record.heavy_start = now

        batch = Batch(
            worker_id=worker.id,
            role=role,
            queries=queries,
            start=now,
            end=end,
            billed_size=billed,
            formation_drops=len(dropped),
        )
        worker.in_flight = batch
        worker.busy_until = end
        if role == ModelRole.LIGHT:
            self.light_executions += 1
        else:
            self.heavy_executions += 1
        self.sim.schedule(end, EventKind.BATCH_COMPLETE, batch)
        return batch

    def _on_batch_start(self, event: Event) -> None:
        worker = self.workers[event.payload]
        worker.start_pending = False
        if event.time < worker.available_at:
            # Re-hosted after this start was scheduled
            worker.start_pending = True
            self.sim.schedule(worker.available_at, EventKind.BATCH_START, worker.id)
            return
        if worker.in_flight is not None or not worker.queue:
            return
        self.form_batch(worker, event.time)

    def _finish(self, record: QueryRecord, now: float, quality: float, served: Outcome) -> None:
        record.completion = now
        record.delivered_quality = quality
        record.outcome = Outcome.LATE if now > record.deadline else served
        self.collector.record_outcome(record)

    def complete_light_batch(self, batch: Batch, threshold: float) -> tuple[list[Query], list[Query]]:
        """
        Answer confident queries with the light output and defer the rest.

        Returns:
            (answered, deferred)
        """
        now = batch.end
        worker = self.workers[batch.worker_id]
        heavy_workers = self.workers_hosting(ModelRole.HEAVY)
        answered: list[Query] = []
        deferrals: list[Query] = []

        for query in batch.queries:
            record = self.records[query.id]
            record.light_end = now
            if self.policy.uses_discriminator:
                self.curve.observe_confidence(query.confidence, self.config.deferral_decay)

            if self.policy.uses_discriminator and query.confidence < threshold:
                if heavy_workers:
                    record.deferred = True
                    deferrals.append(query)
                    continue
                record.forced_light = True
                self.forced_light += 1
            self._finish(record, now, query.quality_light, Outcome.SERVED_LIGHT)
            answered.append(query)

        worker.served_count += len(answered)
        worker.deferred_count += len(deferrals)
        self.deferred += len(deferrals)
        for query in deferrals:
            self._enqueue(query, ModelRole.HEAVY)
        return answered, deferrals

    def complete_heavy_batch(self, batch: Batch) -> list[Query]:
        """Answer every query with the heavy output; late if past its deadline."""
        now = batch.end
        for query in batch.queries:
            record = self.records[query.id]
            record.heavy_end = now
            self._finish(record, now, query.quality_heavy, Outcome.SERVED_HEAVY)
        self.workers[batch.worker_id].served_count += len(batch.queries)
        return batch.queries

    def _on_batch_complete(self, event: Event) -> None:
        batch: Batch = event.payload
        worker = self.workers[batch.worker_id]
        worker.in_flight = None

        if batch.role == ModelRole.LIGHT:
            answered, _ = self.complete_light_batch(batch, self.threshold)
            late = any(self.records[q.id].outcome == Outcome.LATE for q in answered)
        else:
            served = self.complete_heavy_batch(batch)
            late = any(self.records[q.id].outcome == Outcome.LATE for q in served)

        self.policy.on_batch_complete(batch.role, slo_timeout=late or batch.formation_drops > 0)
        self._try_start(worker)

    def _on_trace_end(self, event: Event) -> None:
        self.trace_ended = True
        queued = sum(w.queue_length for w in self.workers)
        logger.info(f"Trace ended at {event.time:.1f}s; draining {queued} queued queries")

    # ------------------------------------------------------------------
    # Control path
    # ------------------------------------------------------------------

    def _accrue_queue_area(self, now: float) -> None:
        """Add queue length x elapsed time per model; call before any queue changes."""
        elapsed = now - self._area_since
        if elapsed <= 0:
            return
        for worker in self.workers:
            if worker.queue:
                self.queue_area[worker.hosted_model] += len(worker.queue) * elapsed
        self._area_since = now

    def _measure_queues(self, now: float, bootstrap_rate: float | None) -> None:
        """Time-averaged queue lengths and arrival rates since the last tick."""
        state = self.controller
        self._accrue_queue_area(now)
        elapsed = now - state.last_tick_time
        if elapsed > 0:
            light_length = self.queue_area[ModelRole.LIGHT] / elapsed
            heavy_length = self.queue_area[ModelRole.HEAVY] / elapsed
        else:
            light_length = float(sum(w.queue_length for w in self.workers_hosting(ModelRole.LIGHT)))
            heavy_length = float(sum(w.queue_length for w in self.workers_hosting(ModelRole.HEAVY)))
        if bootstrap_rate is not None:
            light_rate, heavy_rate = bootstrap_rate, 0.0
        else:
            light_rate = state.light_arrivals / elapsed if elapsed > 0 else 0.0
            heavy_rate = state.heavy_arrivals / elapsed if elapsed > 0 else 0.0
        state.light_queue = QueueState(light_length, light_rate)
        state.heavy_queue = QueueState(heavy_length, heavy_rate)
        state.light_arrivals = state.heavy_arrivals = 0
        self.queue_area = {ModelRole.LIGHT: 0.0, ModelRole.HEAVY: 0.0}

    def _should_replan(self, plan: AllocationPlan, demand: float) -> bool:
        current = self.controller.current_plan
        if current is None or not current.feasible:
            return True
        if plan == current:
            return False
        tolerance = self.config.replan_tolerance
        if tolerance <= 0:
            return True
        return abs(demand - current.demand) > tolerance * max(current.demand, 1e-12)

    def apply_plan(self, plan: AllocationPlan, now: float) -> None:
        """
        Re-host workers, set batch sizes and threshold.

        In-flight batches finish under their old model. Queued queries of a
        re-hosted worker are routed again; heavy-stage queries with no heavy
        worker left are answered with their light output.
        """
        self._accrue_queue_area(now)
        n_light, n_heavy = hosted_counts(plan, self.total_servers)
        light = self.workers_hosting(ModelRole.LIGHT)
        heavy = self.workers_hosting(ModelRole.HEAVY)

        if n_light > len(light):
            switching, target = heavy[len(heavy) - (n_light - len(light)):], ModelRole.LIGHT
        elif n_light < len(light):
            switching, target = light[n_light:], ModelRole.HEAVY
        else:
            switching, target = [], ModelRole.LIGHT

        displaced: list[tuple[Query, ModelRole]] = []
        for worker in switching:
            displaced.extend((q, worker.hosted_model) for q in worker.queue)
            worker.queue.clear()
            worker.hosted_model = target
            worker.available_at = max(now, worker.busy_until) + self.config.switch_delay_seconds

        self.controller.current_plan = plan
        self.threshold = plan.t
        for worker in self.workers:
            worker.batch_size = self._batch_size(worker.hosted_model)

        for query, role in displaced:
            if role == ModelRole.HEAVY and not self.workers_hosting(ModelRole.HEAVY):
                record = self.records[query.id]
                if record.light_end is None:
                    # Routed straight to heavy; it still needs a light pass
                    role = ModelRole.LIGHT
                else:
                    record.forced_light = True
                    self.forced_light += 1
                    self._finish(record, now, query.quality_light, Outcome.SERVED_LIGHT)
                    continue
            # Re-routes are not new demand
            worker = route_query(self.workers_hosting(role))
            worker.queue.append(query)

        for worker in self.workers:
            self._try_start(worker)

        if switching:
            logger.debug(f"t={now:.1f}s re-hosted {len(switching)} workers to {target.value}")
        logger.debug(f"t={now:.1f}s applied {plan.describe()} ({n_light} light / {n_heavy} heavy)")

    def control_tick(self, now: float) -> AllocationPlan:
        """Close the interval, estimate demand, solve and apply; returns the plan in effect."""
        state = self.controller
        tick = state.tick_index

        if tick == 0:
            observed = self.trace.rates[0]
            self._measure_queues(now, bootstrap_rate=observed)
        else:
            snapshot = self.collector.close_interval(now)
            observed = snapshot.demand_observed
            self._measure_queues(now, bootstrap_rate=None)

        state.demand_history.append(observed)
        demand = ewma_estimate(state.demand_history, self.config.ewma_alpha)

        problem = self.base_problem(demand)
        plan, elapsed_us = timed_solve(self.policy.plan, problem, tick)
        self.solver_times_us.append(elapsed_us)

        replanned = self._should_replan(plan, demand)
        if replanned:
            if not plan.feasible:
                logger.warning(f"t={now:.1f}s no feasible plan at D={demand:.2f} qps; best effort {plan.describe()}")
            self.apply_plan(plan, now)
        applied = state.current_plan
        assert applied is not None

        n_light = len(self.workers_hosting(ModelRole.LIGHT))
        n_heavy = self.total_servers - n_light
        stalled = settings.stalled_queue_delay_seconds
        self.collector.record_plan(
            PlanRecord(
                tick=tick,
                time=now,
                demand_estimated=demand,
                plan=applied,
                replanned=replanned,
                light_workers=n_light,
                heavy_workers=n_heavy,
                light_queue_length=state.light_queue.queue_length,
                light_arrival_rate=state.light_queue.arrival_rate,
                heavy_queue_length=state.heavy_queue.queue_length,
                heavy_arrival_rate=state.heavy_queue.arrival_rate,
                q_light_est=queuing_delay(state.light_queue.queue_length, state.light_queue.arrival_rate, stalled),
                q_heavy_est=queuing_delay(state.heavy_queue.queue_length, state.heavy_queue.arrival_rate, stalled),
                solver_us=elapsed_us,
            )
        )
        self.collector.open_interval(tick, now, demand, applied, n_light, n_heavy)

        state.tick_index += 1
        state.last_tick_time = now
        next_tick = now + state.control_interval
        if next_tick < self.trace.duration_seconds:
            self.sim.schedule(next_tick, EventKind.CONTROL_TICK)
        return applied

    def _on_control_tick(self, event: Event) -> None:
        self.control_tick(event.time)

    def finalize(self) -> None:
        """Close the last interval once the drain is complete."""
        if self.collector.has_open_interval:
            start = self.controller.last_tick_time
            end = min(start + self.controller.control_interval, self.trace.duration_seconds)
            self.collector.close_interval(max(end, start))
        in_system = sum(1 for r in self.records.values() if r.outcome is None)
        if in_system:
            raise SimulatorError(f"{in_system} queries still in the system after drain")
