"""Serving systems compared against the adaptive cascade, and its ablations.

Every policy drives the same cluster; they differ only in how a plan is
chosen at each control tick, where a new query enters, whether light results
go through the confidence check, and who picks batch sizes.
"""

import logging
from dataclasses import replace

import numpy as np

from ..models import ModelRole, PolicyKind, PolicyParams, QueueModel
from .allocator import (
    AllocationPlan,
    AllocationProblem,
    solve,
    solve_random_split,
    solve_single_model,
    solve_static_peak,
)
from .profiles import CascadeProfile, ModelProfile

logger = logging.getLogger(__name__)


def aimd_update(
    current_batch: int,
    slo_timeout_observed: bool,
    batch_sizes: tuple[int, ...],
    add_step: int = 1,
    mult_factor: float = 0.5,
) -> int:
    """
    Additive-increase / multiplicative-decrease over the profiled batch sizes.

    On timeout: largest profiled size <= current * mult_factor (floor at the
    smallest size). Otherwise: smallest profiled size >= current + add_step
    (capped at the largest size).
    """
    sizes = sorted(batch_sizes)
    if slo_timeout_observed:
        target = current_batch * mult_factor
        lower = [b for b in sizes if b <= target]
        return lower[-1] if lower else sizes[0]
    target = current_batch + add_step
    upper = [b for b in sizes if b >= target]
    return upper[0] if upper else sizes[-1]


class ServingPolicy:
    """Adaptive cascade: re-solve every tick, route light first, check confidence."""

    kind = PolicyKind.DIFFSERVE
    uses_discriminator = True

    def __init__(self, params: PolicyParams | None = None):
        self.params = params or PolicyParams()
        self.cascade: CascadeProfile | None = None

    def prepare(self, problem: AllocationProblem, peak_demand: float) -> None:
        """Called once before the run with the tick-0 problem and the trace peak."""
        self.cascade = problem.cascade

    def shape_problem(self, problem: AllocationProblem) -> AllocationProblem:
        return problem

    def plan(self, problem: AllocationProblem) -> AllocationPlan:
        return solve(self.shape_problem(problem))

    def entry_role(self, light_workers: int, heavy_workers: int, rng: np.random.Generator) -> ModelRole:
        """Stage a newly arrived query is routed to."""
        return ModelRole.LIGHT

    def batch_size(self, role: ModelRole, plan: AllocationPlan) -> int:
        return plan.b1 if role == ModelRole.LIGHT else plan.b2

    def on_batch_complete(self, role: ModelRole, slo_timeout: bool) -> None:
        """Feedback after every executed batch."""


class StaticPeakPolicy(ServingPolicy):
    """Provisioned once for the trace peak; the plan and threshold never change."""

    kind = PolicyKind.DIFFSERVE_STATIC

    def __init__(self, params: PolicyParams | None = None):
        super().__init__(params)
        self._frozen: AllocationPlan | None = None

    def prepare(self, problem: AllocationProblem, peak_demand: float) -> None:
        super().prepare(problem, peak_demand)
        self._frozen = solve_static_peak(problem, peak_demand)

    def plan(self, problem: AllocationProblem) -> AllocationPlan:
        if self._frozen is None:
            raise RuntimeError("StaticPeakPolicy.plan called before prepare")
        return self._frozen


class StaticThresholdPolicy(ServingPolicy):
    """Threshold pinned for the whole run; servers and batch sizes still adapt."""

    kind = PolicyKind.ABL_STATIC_THRESHOLD

    def __init__(self, params: PolicyParams | None = None):
        super().__init__(params)
        self.fixed_threshold: float | None = self.params.fixed_threshold

    def prepare(self, problem: AllocationProblem, peak_demand: float) -> None:
        super().prepare(problem, peak_demand)
        if self.fixed_threshold is None:
            self.fixed_threshold = solve_static_peak(problem, peak_demand).t
        self.fixed_threshold = min(problem.threshold_grid, key=lambda g: abs(g - self.fixed_threshold))
        logger.info(f"Threshold pinned at {self.fixed_threshold:.2f}")

    def shape_problem(self, problem: AllocationProblem) -> AllocationProblem:
        return replace(problem, fixed_threshold=self.fixed_threshold)


class NoQueuingModelPolicy(ServingPolicy):
    """Queuing delay in the latency constraint estimated as twice the execution delay."""

    kind = PolicyKind.ABL_NO_QUEUING_MODEL

    def shape_problem(self, problem: AllocationProblem) -> AllocationProblem:
        return replace(problem, queue_model=QueueModel.TWICE_EXEC)


class AimdBatchingPolicy(ServingPolicy):
    """Allocator picks servers and threshold; workers batch with AIMD per model."""

    kind = PolicyKind.ABL_AIMD_BATCHING

    def __init__(self, params: PolicyParams | None = None):
        super().__init__(params)
        self._batch: dict[ModelRole, int] = {}

    def _profile(self, role: ModelRole) -> ModelProfile:
        if self.cascade is None:
            raise RuntimeError("AimdBatchingPolicy used before prepare")
        return self.cascade.light if role == ModelRole.LIGHT else self.cascade.heavy

    def batch_size(self, role: ModelRole, plan: AllocationPlan) -> int:
        # Seeded from the first plan, then owned by the AIMD loop
        if role not in self._batch:
            self._batch[role] = super().batch_size(role, plan)
        return self._batch[role]

    def on_batch_complete(self, role: ModelRole, slo_timeout: bool) -> None:
        if role not in self._batch:
            return
        before = self._batch[role]
        self._batch[role] = aimd_update(
            before,
            slo_timeout,
            self._profile(role).batch_sizes,
            add_step=self.params.aimd_add_step,
            mult_factor=self.params.aimd_mult_factor,
        )
        if self._batch[role] != before:
            logger.debug(f"AIMD {role.value} batch {before} -> {self._batch[role]} (timeout={slo_timeout})")


class ClipperPolicy(ServingPolicy):
    """One model variant on every server; no cascade."""

    uses_discriminator = False

    def __init__(self, params: PolicyParams | None = None, heavy: bool = False):
        super().__init__(params)
        self.heavy = heavy
        self.kind = PolicyKind.CLIPPER_HEAVY if heavy else PolicyKind.CLIPPER_LIGHT

    def plan(self, problem: AllocationProblem) -> AllocationPlan:
        return solve_single_model(problem, heavy=self.heavy)

    def entry_role(self, light_workers: int, heavy_workers: int, rng: np.random.Generator) -> ModelRole:
        return ModelRole.HEAVY if self.heavy else ModelRole.LIGHT


class ProteusLikePolicy(ServingPolicy):
    """Dynamic allocation with random, query-agnostic routing over hosted variants."""

    kind = PolicyKind.PROTEUS_LIKE
    uses_discriminator = False

    def plan(self, problem: AllocationProblem) -> AllocationPlan:
        return solve_random_split(problem, heavy_share=self.params.random_split)

    def entry_role(self, light_workers: int, heavy_workers: int, rng: np.random.Generator) -> ModelRole:
        # One draw per arrival keeps the routing stream aligned across plans
        draw = rng.random()
        if heavy_workers == 0:
            return ModelRole.LIGHT
        if light_workers == 0:
            return ModelRole.HEAVY
        return ModelRole.HEAVY if draw < self.params.random_split else ModelRole.LIGHT


def apply_policy(kind: PolicyKind, params: PolicyParams | None = None) -> ServingPolicy:
    """Build the strategy object for a policy kind."""
    match kind:
        case PolicyKind.DIFFSERVE:
            return ServingPolicy(params)
        case PolicyKind.DIFFSERVE_STATIC:
            return StaticPeakPolicy(params)
        case PolicyKind.CLIPPER_LIGHT:
            return ClipperPolicy(params, heavy=False)
        case PolicyKind.CLIPPER_HEAVY:
            return ClipperPolicy(params, heavy=True)
        case PolicyKind.PROTEUS_LIKE:
            return ProteusLikePolicy(params)
        case PolicyKind.ABL_STATIC_THRESHOLD:
            return StaticThresholdPolicy(params)
        case PolicyKind.ABL_AIMD_BATCHING:
            return AimdBatchingPolicy(params)
        case PolicyKind.ABL_NO_QUEUING_MODEL:
            return NoQueuingModelPolicy(params)
    raise ValueError(f"Unknown policy kind: {kind}")
