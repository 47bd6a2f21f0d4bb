"""Tests for allocator.py"""

from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.allocator import (
    DEFAULT_THRESHOLD_GRID,
    AllocationPlan,
    AllocationProblem,
    QueueState,
    hosted_counts,
    latency_feasible,
    queuing_delay,
    solve,
    solve_random_split,
    solve_single_model,
    solve_static_peak,
    threshold_grid,
    throughput_feasible,
    timed_solve,
)
from app.core.profiles import CascadeProfile, DeferralCurve, DomainError, ModelProfile
from app.models import QueueModel


def _plan(x1=1, x2=0, b1=1, b2=1, t=0.0):
    return AllocationPlan(x1=x1, x2=x2, b1=b1, b2=b2, t=t, feasible=True)


class TestQueuingDelay:
    """Test the Little's law estimate."""

    def test_formula(self):
        assert queuing_delay(20, 10.0) == 2.0

    def test_empty_queue(self):
        assert queuing_delay(0, 5.0) == 0.0
        assert queuing_delay(0, 0.0) == 0.0

    def test_stalled_queue_sentinel(self):
        assert queuing_delay(7, 0.0) == 1e6
        assert queuing_delay(7, 0.0, stalled_delay=99.0) == 99.0

    def test_negative_inputs(self):
        with pytest.raises(DomainError):
            queuing_delay(-1, 1.0)
        with pytest.raises(DomainError):
            queuing_delay(1, -1.0)


class TestThresholdGrid:
    """Test grid construction and problem validation."""

    def test_default_grid(self):
        assert len(DEFAULT_THRESHOLD_GRID) == 101
        assert DEFAULT_THRESHOLD_GRID[0] == 0.0
        assert DEFAULT_THRESHOLD_GRID[30] == 0.3
        assert DEFAULT_THRESHOLD_GRID[-1] == 1.0

    def test_uneven_step_ends_at_one(self):
        assert threshold_grid(0.3) == (0.0, 0.3, 0.6, 0.9, 1.0)

    def test_grid_without_zero_rejected(self, toy_cascade):
        with pytest.raises(DomainError):
            AllocationProblem(demand=1.0, total_servers=1, cascade=toy_cascade, threshold_grid=(0.1, 0.5))

    def test_lambda_below_one_rejected(self, toy_cascade):
        with pytest.raises(DomainError):
            AllocationProblem(demand=1.0, total_servers=1, cascade=toy_cascade, overprovision_lambda=0.9)

    def test_pinned_threshold_off_grid_rejected(self, toy_cascade):
        with pytest.raises(DomainError):
            AllocationProblem(demand=1.0, total_servers=1, cascade=toy_cascade, fixed_threshold=0.555)


class TestLatencyFeasible:
    """Test e1 + q1 + e2 + q2 <= L."""

    def test_cascade1_empty_queues(self, cascade1):
        problem = AllocationProblem(demand=1.0, total_servers=4, cascade=cascade1)
        assert latency_feasible(_plan(b1=1, b2=1), problem)

    def test_cascade1_queued(self, cascade1):
        """0.1 + 2 + 1.78 + 2 = 5.88 > 5."""
        queue = QueueState(queue_length=20, arrival_rate=10.0)
        problem = AllocationProblem(
            demand=1.0, total_servers=4, cascade=cascade1, light_queue=queue, heavy_queue=queue
        )
        assert not latency_feasible(_plan(b1=1, b2=1), problem)

    def test_large_heavy_batch_misses_slo(self, cascade1):
        problem = AllocationProblem(demand=1.0, total_servers=4, cascade=cascade1)
        assert latency_feasible(_plan(b1=16, b2=2), problem)
        assert not latency_feasible(_plan(b1=1, b2=4), problem)

    def test_light_batch_wait_floor(self, cascade1):
        """1.0 + 1.0 + 3.2 = 5.2 > 5 once a light query waits out the batch in flight."""
        problem = AllocationProblem(demand=1.0, total_servers=4, cascade=cascade1, light_batch_wait=True)
        assert not latency_feasible(_plan(b1=16, b2=2), problem)
        assert latency_feasible(_plan(b1=1, b2=2), problem)

    def test_light_batch_wait_below_queue_estimate(self, cascade1):
        """The floor does not add to a Little's law wait that already exceeds it."""
        queue = QueueState(queue_length=5, arrival_rate=10.0)
        plain = AllocationProblem(demand=1.0, total_servers=4, cascade=cascade1, light_queue=queue)
        floored = replace(plain, light_batch_wait=True)
        assert latency_feasible(_plan(b1=1, b2=2), plain)
        assert latency_feasible(_plan(b1=1, b2=2), floored)

    def test_twice_exec_model(self, cascade1):
        """3 * (0.1 + 1.78) = 5.64 > 5 once queuing is charged as 2x execution."""
        problem = AllocationProblem(
            demand=1.0, total_servers=4, cascade=cascade1, queue_model=QueueModel.TWICE_EXEC
        )
        assert not latency_feasible(_plan(b1=1, b2=1), problem)


class TestThroughputFeasible:
    """Test the stage capacity constraints."""

    def test_exact_fit(self, toy_cascade):
        problem = AllocationProblem(demand=10.0, total_servers=4, cascade=toy_cascade, overprovision_lambda=1.0)
        assert throughput_feasible(_plan(x1=1, x2=3, t=0.30), problem)

    def test_heavy_short_by_a_hair(self, toy_cascade):
        problem = AllocationProblem(demand=10.0, total_servers=4, cascade=toy_cascade, overprovision_lambda=1.0)
        assert not throughput_feasible(_plan(x1=1, x2=3, t=0.31), problem)

    def test_overprovisioning_bites(self):
        """Two servers at T(16) = 5 cover D = 10 but not 1.05 * 10."""
        cascade = CascadeProfile(
            name="c",
            light=ModelProfile("l", {16: 3.2}),
            heavy=ModelProfile("h", {16: 32.0}),
            deferral=DeferralCurve(),
            slo_seconds=100.0,
        )
        plan = _plan(x1=2, x2=0, b1=16, b2=16, t=0.0)
        assert throughput_feasible(plan, AllocationProblem(demand=10.0, total_servers=4, cascade=cascade, overprovision_lambda=1.0))
        assert not throughput_feasible(plan, AllocationProblem(demand=10.0, total_servers=4, cascade=cascade))

    def test_server_budget(self, toy_cascade):
        problem = AllocationProblem(demand=1.0, total_servers=2, cascade=toy_cascade)
        assert not throughput_feasible(_plan(x1=2, x2=1, t=0.0), problem)


class TestSolve:
    """Test the threshold-maximizing search."""

    def test_toy_instance(self, toy_cascade):
        problem = AllocationProblem(demand=10.0, total_servers=4, cascade=toy_cascade, overprovision_lambda=1.0)
        plan = solve(problem)
        assert plan.feasible
        assert plan.t == 0.30
        assert (plan.x1, plan.x2) == (1, 3)

    def test_zero_demand_takes_top_threshold(self, cascade1, linear_curve):
        problem = AllocationProblem(demand=0.0, total_servers=16, cascade=replace(cascade1, deferral=linear_curve))
        plan = solve(problem)
        assert plan.feasible
        assert plan.t == 1.0

    def test_tiny_demand_takes_top_threshold(self, cascade1, linear_curve):
        problem = AllocationProblem(demand=0.01, total_servers=16, cascade=replace(cascade1, deferral=linear_curve))
        assert solve(problem).t == 1.0

    def test_light_overload_is_infeasible(self, cascade1):
        """Light stage alone needs more than S * max T1 = 256 qps."""
        problem = AllocationProblem(demand=300.0, total_servers=16, cascade=cascade1)
        plan = solve(problem)
        assert not plan.feasible
        assert plan.t == 0.0
        assert plan.x1 == 16
        assert plan.x2 == 0

    def test_best_effort_minimizes_light_deficit(self, toy_cascade):
        problem = AllocationProblem(demand=20.0, total_servers=1, cascade=toy_cascade)
        plan = solve(problem)
        assert (plan.x1, plan.x2, plan.t, plan.feasible) == (1, 0, 0.0, False)

    def test_no_heavy_servers_when_nothing_defers(self, cascade1):
        """Empty curve: f = 0 everywhere, so x2 = 0 is allowed."""
        plan = solve(AllocationProblem(demand=5.0, total_servers=4, cascade=cascade1))
        assert plan.feasible
        assert plan.t == 1.0
        assert plan.x2 == 0
        assert plan.x1 >= 1

    def test_prefers_larger_batches_on_ties(self):
        """Equal server counts: the larger light batch wins."""
        cascade = CascadeProfile(
            name="c",
            light=ModelProfile("l", {1: 0.1, 2: 0.2}),
            heavy=ModelProfile("h", {1: 1.0}),
            deferral=DeferralCurve(),
            slo_seconds=100.0,
        )
        plan = solve(AllocationProblem(demand=5.0, total_servers=2, cascade=cascade))
        assert (plan.b1, plan.b2) == (2, 1)

    def test_fewest_servers_on_ties(self, toy_cascade):
        """Low demand leaves spare servers rather than using them all."""
        plan = solve(AllocationProblem(demand=1.0, total_servers=8, cascade=toy_cascade, overprovision_lambda=1.0))
        assert plan.t == 1.0
        assert (plan.x1, plan.x2) == (1, 1)

    def test_pinned_threshold(self, toy_cascade):
        problem = AllocationProblem(
            demand=10.0, total_servers=4, cascade=toy_cascade, overprovision_lambda=1.0, fixed_threshold=0.2
        )
        plan = solve(problem)
        assert plan.feasible
        assert (plan.t, plan.x1, plan.x2) == (0.2, 1, 2)

    def test_pinned_threshold_infeasible_keeps_threshold(self, toy_cascade):
        problem = AllocationProblem(
            demand=10.0, total_servers=4, cascade=toy_cascade, overprovision_lambda=1.0, fixed_threshold=0.5
        )
        plan = solve(problem)
        assert not plan.feasible
        assert plan.t == 0.5
        assert (plan.x1, plan.x2) == (1, 3)

    def test_twice_exec_cascade1_falls_back(self, cascade1, linear_curve):
        """No batch pair fits the SLO once queuing is charged at twice execution."""
        problem = AllocationProblem(
            demand=4.0,
            total_servers=16,
            cascade=replace(cascade1, deferral=linear_curve),
            queue_model=QueueModel.TWICE_EXEC,
        )
        plan = solve(problem)
        assert not plan.feasible
        assert plan.t == 0.0

    def test_deterministic(self, cascade1, linear_curve):
        problem = AllocationProblem(demand=17.3, total_servers=16, cascade=replace(cascade1, deferral=linear_curve))
        assert solve(problem) == solve(problem)

    def test_solver_time(self, cascade1, linear_curve):
        """A full scan over the grid stays within a control-loop budget."""
        problem = AllocationProblem(demand=300.0, total_servers=16, cascade=replace(cascade1, deferral=linear_curve))
        timings = [timed_solve(solve, problem, interval=0)[1] for _ in range(20)]
        assert sum(timings) / len(timings) < 50_000


class TestStaticPeak:
    """Test the peak-provisioned plan."""

    def test_matches_solve_at_peak(self, cascade1, linear_curve):
        cascade = replace(cascade1, deferral=linear_curve)
        queued = QueueState(queue_length=3, arrival_rate=4.0)
        problem = AllocationProblem(demand=4.0, total_servers=16, cascade=cascade, light_queue=queued)
        expected = solve(AllocationProblem(demand=32.0, total_servers=16, cascade=cascade))
        assert solve_static_peak(problem, 32.0) == expected

    def test_constant_demand_matches_per_interval(self, toy_cascade):
        problem = AllocationProblem(demand=10.0, total_servers=4, cascade=toy_cascade)
        assert solve_static_peak(problem, 10.0) == solve(problem)


class TestSingleModel:
    """Test the one-variant allocations."""

    def test_light_only(self, cascade1):
        plan = solve_single_model(AllocationProblem(demand=8.0, total_servers=4, cascade=cascade1), heavy=False)
        assert plan.feasible
        assert (plan.x1, plan.x2, plan.t) == (4, 0, 0.0)
        assert plan.b1 == 16

    def test_heavy_only(self, cascade1):
        """Heavy batches above 2 miss the 5 s SLO; b=2 is the largest that fits."""
        plan = solve_single_model(AllocationProblem(demand=1.0, total_servers=4, cascade=cascade1), heavy=True)
        assert plan.feasible
        assert (plan.x1, plan.x2, plan.t) == (0, 4, 1.0)
        assert plan.b2 == 2

    def test_heavy_overload(self, cascade1):
        plan = solve_single_model(AllocationProblem(demand=32.0, total_servers=16, cascade=cascade1), heavy=True)
        assert not plan.feasible
        assert plan.b2 == 2


class TestRandomSplit:
    """Test the query-agnostic two-variant allocation."""

    def test_hosts_both_when_they_fit(self, cascade1):
        plan = solve_random_split(AllocationProblem(demand=2.0, total_servers=8, cascade=cascade1), 0.5)
        assert plan.feasible
        assert plan.x1 >= 1
        assert plan.x2 >= 1
        assert plan.x1 + plan.x2 <= 8

    def test_falls_back_to_light(self, cascade1):
        plan = solve_random_split(AllocationProblem(demand=32.0, total_servers=16, cascade=cascade1), 0.5)
        assert (plan.x1, plan.x2) == (16, 0)

    def test_share_out_of_range(self, cascade1):
        with pytest.raises(DomainError):
            solve_random_split(AllocationProblem(demand=1.0, total_servers=2, cascade=cascade1), 1.0)


class TestHostedCounts:
    """Test spreading a plan over every server."""

    def test_spare_goes_heavy(self):
        assert hosted_counts(_plan(x1=2, x2=3), 8) == (2, 6)

    def test_spare_goes_light_without_heavy(self):
        assert hosted_counts(_plan(x1=2, x2=0), 8) == (8, 0)

    def test_overcommitted_plan(self):
        with pytest.raises(DomainError):
            hosted_counts(_plan(x1=5, x2=5), 8)


# ---------------------------------------------------------------------------
# Properties against an enumeration oracle
# ---------------------------------------------------------------------------


@st.composite
def allocation_problems(draw):
    sizes = sorted(draw(st.sets(st.sampled_from([1, 2, 4, 8, 16]), min_size=1, max_size=3)))
    exponent = draw(st.floats(0.5, 1.0))
    light_base = draw(st.floats(0.02, 0.5))
    heavy_base = draw(st.floats(0.5, 3.0))
    cascade = CascadeProfile(
        name="random",
        light=ModelProfile("l", {b: light_base * b**exponent for b in sizes}),
        heavy=ModelProfile("h", {b: heavy_base * b**exponent for b in sizes}),
        deferral=DeferralCurve.from_samples(draw(st.lists(st.floats(0.0, 1.0), max_size=30))),
        slo_seconds=draw(st.floats(1.0, 30.0)),
    )
    return AllocationProblem(
        demand=draw(st.floats(0.0, 40.0)),
        total_servers=draw(st.integers(1, 20)),
        cascade=cascade,
        overprovision_lambda=draw(st.floats(1.0, 1.2)),
        light_queue=QueueState(draw(st.integers(0, 10)), draw(st.floats(0.5, 20.0))),
        heavy_queue=QueueState(draw(st.integers(0, 10)), draw(st.floats(0.5, 20.0))),
    )


def _feasible_plans_at(problem, t):
    """Every (x1, x2, b1, b2) satisfying both predicates at threshold t."""
    c = problem.cascade
    S = problem.total_servers
    for b1 in c.light.batch_sizes:
        for b2 in c.heavy.batch_sizes:
            if not latency_feasible(_plan(b1=b1, b2=b2, t=t), problem):
                continue
            for x1 in range(1, S + 1):
                for x2 in range(0, S - x1 + 1):
                    plan = _plan(x1=x1, x2=x2, b1=b1, b2=b2, t=t)
                    if throughput_feasible(plan, problem):
                        yield plan


def _oracle_best_t(problem):
    """Largest grid t with any feasible plan; capacity only grows with x2, so x2 = S - x1 decides."""
    c = problem.cascade
    S = problem.total_servers
    for t in reversed(problem.threshold_grid):
        for b1 in c.light.batch_sizes:
            for b2 in c.heavy.batch_sizes:
                if not latency_feasible(_plan(b1=b1, b2=b2, t=t), problem):
                    continue
                for x1 in range(1, S + 1):
                    if throughput_feasible(_plan(x1=x1, x2=S - x1, b1=b1, b2=b2, t=t), problem):
                        return t
    return None


class TestSolverProperties:
    """Test solve against enumeration and its monotonicity."""

    @settings(max_examples=200, deadline=None)
    @given(problem=allocation_problems())
    def test_matches_enumeration(self, problem):
        plan = solve(problem)
        best_t = _oracle_best_t(problem)
        if best_t is None:
            assert not plan.feasible
            return
        assert plan.feasible
        assert plan.t == best_t
        assert latency_feasible(plan, problem)
        assert throughput_feasible(plan, problem)
        assert plan.x1 >= 1
        assert plan.x1 + plan.x2 == min(p.x1 + p.x2 for p in _feasible_plans_at(problem, best_t))

    @settings(max_examples=100, deadline=None)
    @given(problem=allocation_problems(), extra=st.floats(0.0, 20.0))
    def test_more_demand_never_raises_threshold(self, problem, extra):
        more = replace(problem, demand=problem.demand + extra)
        low, high = solve(problem), solve(more)
        if high.feasible:
            assert low.feasible
            assert low.t >= high.t

    @settings(max_examples=100, deadline=None)
    @given(problem=allocation_problems(), extra=st.floats(0.0, 0.5))
    def test_more_overprovisioning_never_raises_threshold(self, problem, extra):
        more = replace(problem, overprovision_lambda=problem.overprovision_lambda + extra)
        low, high = solve(problem), solve(more)
        if high.feasible:
            assert low.feasible
            assert low.t >= high.t

    @settings(max_examples=100, deadline=None)
    @given(problem=allocation_problems(), shift=st.floats(0.0, 0.5))
    def test_smaller_deferral_never_lowers_threshold(self, problem, shift):
        """Shifting confidences up makes f pointwise smaller."""
        curve = problem.curve
        raised = DeferralCurve(resolution=curve.resolution)
        for index, mass in enumerate(curve.bin_mass):
            if mass > 0:
                position = min(1.0, index / curve.resolution + shift)
                raised.bin_mass[raised._bin_index(position)] += mass
                raised.total_mass += mass
        easier = replace(problem, deferral=raised)
        base, relaxed = solve(problem), solve(easier)
        if base.feasible:
            assert relaxed.feasible
            assert relaxed.t >= base.t
