"""Tests for workload.py"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from app.core.profiles import DeferralCurve
from app.core.workload import (
    EstimationError,
    Trace,
    TraceFormatError,
    TraceShapeError,
    ewma_estimate,
    generate_arrivals,
    load_trace,
    profile_confidences,
    sample_query,
    scale_trace,
)
from app.models import ArrivalMode, QueryOutcomeModel


class TestLoadTrace:
    """Test trace file parsing."""

    def test_parses_rates(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("4\n8\n16\n")
        trace = load_trace(path, 1.0)
        assert trace.rates == (4.0, 8.0, 16.0)
        assert trace.duration_seconds == 3.0

    def test_checked_in_trace_extremes(self, traces_dir):
        """trace_AtoBqps files span exactly [A, B]."""
        trace = load_trace(traces_dir / "trace_4to32qps.txt")
        assert trace.min_rate == 4.0
        assert trace.peak_rate == 32.0

    def test_negative_rate_names_line(self, write_trace):
        with pytest.raises(TraceFormatError, match=r"line 2"):
            load_trace(write_trace([1, -1]))

    def test_unparseable_line(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("3\nfast\n")
        with pytest.raises(TraceFormatError, match=r"'fast'.*line 2"):
            load_trace(path)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "t.txt"
        path.write_text("")
        with pytest.raises(TraceFormatError, match="empty"):
            load_trace(path)

    def test_rate_at_clamps(self):
        trace = Trace(interval_seconds=10.0, rates=(1.0, 2.0))
        assert trace.rate_at(0.0) == 1.0
        assert trace.rate_at(15.0) == 2.0
        assert trace.rate_at(99.0) == 2.0


class TestScaleTrace:
    """Test shape-preserving rescaling."""

    def test_affine_endpoints(self):
        scaled = scale_trace(Trace(1.0, (0.0, 5.0, 10.0)), 4.0, 32.0)
        assert scaled.rates == (4.0, 18.0, 32.0)

    def test_identity(self):
        trace = Trace(1.0, (1.0, 2.0, 4.0))
        assert scale_trace(trace, 1.0, 4.0).rates == (1.0, 2.0, 4.0)

    def test_two_points(self):
        assert scale_trace(Trace(1.0, (3.0, 7.0)), 1.0, 8.0).rates == (1.0, 8.0)

    def test_constant_trace_to_range(self):
        with pytest.raises(TraceShapeError):
            scale_trace(Trace(1.0, (5.0, 5.0)), 1.0, 8.0)

    def test_constant_trace_to_point(self):
        assert scale_trace(Trace(1.0, (5.0, 5.0)), 2.0, 2.0).rates == (2.0, 2.0)

    def test_inverted_range(self):
        with pytest.raises(TraceShapeError):
            scale_trace(Trace(1.0, (1.0, 2.0)), 8.0, 1.0)

    @settings(max_examples=100, deadline=None)
    @given(
        rates=st.lists(st.floats(0.0, 100.0), min_size=2, max_size=50).filter(lambda r: min(r) < max(r)),
        low=st.floats(0.0, 50.0),
        width=st.floats(0.1, 50.0),
    )
    def test_preserves_order_and_extremes(self, rates, low, width):
        """Scaling is monotone and hits the requested extremes exactly."""
        high = low + width
        scaled = scale_trace(Trace(1.0, tuple(rates)), low, high)
        assert scaled.rates[rates.index(min(rates))] == low
        assert scaled.rates[rates.index(max(rates))] == high
        for (a, b), (sa, sb) in zip(zip(rates, rates[1:]), zip(scaled.rates, scaled.rates[1:])):
            if a < b:
                assert sa <= sb + 1e-9
            elif a > b:
                assert sa + 1e-9 >= sb


class TestGenerateArrivals:
    """Test the arrival process."""

    def test_uniform_spacing(self):
        arrivals = generate_arrivals(Trace(1.0, (2.0,)), 0, ArrivalMode.UNIFORM)
        assert list(arrivals) == [0.0, 0.5]

    def test_uniform_carries_remainder(self):
        """0.5 qps over two 1 s intervals yields one arrival, in the second."""
        arrivals = generate_arrivals(Trace(1.0, (0.5, 0.5)), 0, ArrivalMode.UNIFORM)
        assert list(arrivals) == [1.0]

    @pytest.mark.parametrize("mode", list(ArrivalMode))
    def test_zero_rate(self, mode):
        assert len(generate_arrivals(Trace(1.0, (0.0,)), 0, mode)) == 0

    def test_poisson_count(self):
        """10 qps for 600 s lands within 5% of 6000 arrivals."""
        arrivals = generate_arrivals(Trace(1.0, (10.0,) * 600), 42, ArrivalMode.POISSON)
        assert 5700 <= len(arrivals) <= 6300

    def test_poisson_deterministic(self):
        trace = Trace(1.0, (5.0,) * 20)
        np.testing.assert_array_equal(generate_arrivals(trace, 7), generate_arrivals(trace, 7))
        assert not np.array_equal(generate_arrivals(trace, 7), generate_arrivals(trace, 8))

    def test_strictly_increasing_within_trace(self):
        trace = Trace(2.0, (3.0, 0.0, 20.0))
        arrivals = generate_arrivals(trace, 3)
        assert np.all(np.diff(arrivals) > 0)
        assert arrivals[0] >= 0.0
        assert arrivals[-1] < trace.duration_seconds
        # Nothing arrives during the zero-rate interval
        assert not np.any((arrivals >= 2.0) & (arrivals < 4.0))


class TestSampleQuery:
    """Test the synthetic query outcome model."""

    def test_all_easy(self):
        model = QueryOutcomeModel(easy_fraction=1.0, noise_sigma=0.0)
        for i in range(200):
            query = sample_query(model, i, 0.0, 5.0)
            assert query.quality_light >= query.quality_heavy
            assert query.is_easy

    def test_easy_fraction(self):
        """Empirical easy share tracks easy_fraction."""
        model = QueryOutcomeModel(easy_fraction=0.3)
        easy = sum(sample_query(model, i, 0.0, 5.0).is_easy for i in range(100_000))
        assert 0.29 <= easy / 100_000 <= 0.31

    def test_uninformative_discriminator(self):
        model = QueryOutcomeModel(confidence_fidelity=0.0, noise_sigma=0.0)
        assert {sample_query(model, i, 0.0, 5.0).confidence for i in range(100)} == {0.5}

    def test_deadline_and_determinism(self):
        model = QueryOutcomeModel(seed=9)
        first = sample_query(model, 17, 3.25, 5.0)
        assert first.deadline == 8.25
        assert first == sample_query(model, 17, 3.25, 5.0)
        assert first.confidence != sample_query(QueryOutcomeModel(seed=10), 17, 3.25, 5.0).confidence

    def test_confidence_tracks_easiness(self):
        """Easy queries score higher on average than hard ones."""
        queries = [sample_query(QueryOutcomeModel(), i, 0.0, 5.0) for i in range(5000)]
        easy = [q.confidence for q in queries if q.is_easy]
        hard = [q.confidence for q in queries if not q.is_easy]
        assert np.mean(easy) > np.mean(hard)
        assert all(0.0 <= q.confidence <= 1.0 for q in queries)

    def test_profile_confidences(self):
        values = profile_confidences(QueryOutcomeModel(seed=1), count=50)
        assert len(values) == 50
        assert all(0.0 <= c <= 1.0 for c in values)

    def test_profiled_curve_spreads_over_thresholds(self):
        curve = DeferralCurve.from_samples(profile_confidences(QueryOutcomeModel(seed=1), count=1000))
        assert curve.deferral_fraction(0.01) < 0.1
        assert 0.6 < curve.deferral_fraction(0.5) < 0.8
        assert curve.deferral_fraction(0.7) - curve.deferral_fraction(0.3) > 0.2
        assert curve.deferral_fraction(0.99) > 0.9


class TestEwmaEstimate:
    """Test demand smoothing."""

    def test_single_observation(self):
        assert ewma_estimate([10.0], 0.3) == 10.0

    def test_two_observations(self):
        assert ewma_estimate([10.0, 20.0], 0.5) == 15.0

    def test_empty_history(self):
        with pytest.raises(EstimationError):
            ewma_estimate([], 0.3)

    @settings(max_examples=50, deadline=None)
    @given(value=st.floats(0.0, 1000.0), length=st.integers(1, 30), alpha=st.floats(0.01, 1.0))
    def test_constant_fixed_point(self, value, length, alpha):
        assert ewma_estimate([value] * length, alpha) == pytest.approx(value)
