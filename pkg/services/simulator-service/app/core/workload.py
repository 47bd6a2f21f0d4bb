"""Demand traces, synthetic queries and demand estimation.

Trace files hold one queries-per-second value per line; the interval each
line covers is supplied by the experiment config (1 s by default). Files are
named trace_{A}to{B}qps.txt where A and B are the minimum and maximum rates.
"""

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..models import ArrivalMode, QueryOutcomeModel, SimulatorError

logger = logging.getLogger(__name__)

# Fixed stream key that keeps per-query draws independent of every other stream
_QUERY_STREAM_KEY = 0x51A7


class WorkloadError(SimulatorError):
    """Base class for workload errors."""

    module = "workload"


class TraceFormatError(WorkloadError):
    """Trace file is empty or holds an invalid line."""

    def __init__(self, message: str, line: int | None = None):
        location = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{location}")
        self.line = line


class TraceShapeError(WorkloadError):
    """Requested scaling cannot preserve the trace's shape."""


class EstimationError(WorkloadError):
    """Demand estimation was asked for with no history."""


@dataclass(frozen=True)
class Trace:
    """Arrival-rate trace: one rate (qps) per fixed-length interval."""

    interval_seconds: float
    rates: tuple[float, ...]

    def __post_init__(self) -> None:
        if not self.interval_seconds > 0:
            raise TraceFormatError(f"Trace interval must be positive, got {self.interval_seconds}")
        if not self.rates:
            raise TraceFormatError("Trace has no rates")
        if any(r < 0 for r in self.rates):
            raise TraceFormatError("Trace rates must be non-negative")

    @property
    def duration_seconds(self) -> float:
        return len(self.rates) * self.interval_seconds

    @property
    def peak_rate(self) -> float:
        return max(self.rates)

    @property
    def min_rate(self) -> float:
        return min(self.rates)

    def rate_at(self, time_seconds: float) -> float:
        """Rate of the interval containing time_seconds (clamped to the trace)."""
        index = int(time_seconds // self.interval_seconds)
        return self.rates[max(0, min(index, len(self.rates) - 1))]


@dataclass(frozen=True, slots=True)
class Query:
    """One text-prompt request with its latent discriminator and quality draws."""

    id: int
    arrival_time: float
    confidence: float
    quality_light: float
    quality_heavy: float
    deadline: float

    @property
    def is_easy(self) -> bool:
        """Light model output is at least as good as the heavy model's."""
        return self.quality_light >= self.quality_heavy


def load_trace(path: Path | str, interval_seconds: float = 1.0) -> Trace:
    """
    Load a trace file with one non-negative rate per line.

    Args:
        path: Trace file path
        interval_seconds: Duration each line covers

    Returns:
        Trace with rates in file order

    Raises:
        TraceFormatError: Missing/empty file, negative rate or unparseable line
    """
    path = Path(path)
    if not path.is_file():
        raise TraceFormatError(f"Trace file not found: {path}")

    rates: list[float] = []
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        text = line.strip()
        try:
            rate = float(text)
        except ValueError:
            raise TraceFormatError(f"{path}: cannot parse rate {text!r}", line=line_number) from None
        if not math.isfinite(rate) or rate < 0:
            raise TraceFormatError(f"{path}: rate must be a finite non-negative number, got {text}", line=line_number)
        rates.append(rate)

    if not rates:
        raise TraceFormatError(f"{path}: trace file is empty")

    logger.info(f"Loaded trace {path.name}: {len(rates)} intervals, {min(rates):g}-{max(rates):g} qps")
    return Trace(interval_seconds=interval_seconds, rates=tuple(rates))


def scale_trace(trace: Trace, new_min: float, new_max: float) -> Trace:
    """
    Shape-preserving affine rescale of a trace onto [new_min, new_max].

    Raises:
        TraceShapeError: new_min > new_max, negative target, or a constant
            trace asked to span a non-empty range
    """
    if new_min > new_max:
        raise TraceShapeError(f"new_min {new_min} exceeds new_max {new_max}")
    if new_min < 0:
        raise TraceShapeError(f"Scaled rates must be non-negative, got new_min {new_min}")

    low, high = trace.min_rate, trace.peak_rate
    if (low, high) == (new_min, new_max):
        return trace

    if high == low:
        if new_min != new_max:
            raise TraceShapeError("Cannot stretch a constant trace onto a non-empty range")
        return Trace(trace.interval_seconds, tuple(float(new_min) for _ in trace.rates))

    span = new_max - new_min
    scaled = []
    for r in trace.rates:
        if r == low:
            scaled.append(float(new_min))
        elif r == high:
            scaled.append(float(new_max))
        else:
            scaled.append(new_min + (r - low) / (high - low) * span)
    return Trace(trace.interval_seconds, tuple(scaled))


def _strictly_increasing(times: np.ndarray) -> np.ndarray:
    """Nudge exact ties (probability ~0) so arrival times strictly increase."""
    for i in range(1, len(times)):
        if times[i] <= times[i - 1]:
            times[i] = np.nextafter(times[i - 1], np.inf)
    return times


def generate_arrivals(
    trace: Trace,
    rng_seed: int | np.random.SeedSequence,
    mode: ArrivalMode = ArrivalMode.POISSON,
) -> np.ndarray:
    """
    Expand a rate trace into absolute arrival times.

    Poisson mode draws a Poisson count per interval and places arrivals at
    sorted uniform positions (a homogeneous Poisson process within the
    interval). Uniform mode spaces arrivals evenly from the interval start and
    carries fractional remainders to the next interval.

    Returns:
        Strictly increasing arrival times in seconds
    """
    rng = np.random.default_rng(rng_seed)
    dt = trace.interval_seconds
    chunks: list[np.ndarray] = []
    owed = 0.0

    for k, rate in enumerate(trace.rates):
        start = k * dt
        expected = rate * dt
        if mode == ArrivalMode.POISSON:
            count = int(rng.poisson(expected)) if expected > 0 else 0
            if count:
                chunks.append(start + np.sort(rng.random(count)) * dt)
        else:
            owed += expected
            count = int(math.floor(owed + 1e-9))
            owed -= count
            if count:
                chunks.append(start + np.arange(count, dtype=np.float64) * (dt / count))

    if not chunks:
        return np.empty(0, dtype=np.float64)
    return _strictly_increasing(np.concatenate(chunks))


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


def sample_query(model: QueryOutcomeModel, query_id: int, arrival_time: float, slo_seconds: float) -> Query:
    """
    Draw a query's latent confidence and light/heavy qualities.

    The quality gap (light minus heavy) is non-negative with probability
    easy_fraction and exponentially distributed in magnitude. Confidence is the
    logistic of fidelity * gap + noise, so it is 0.5 at a zero gap and rises
    with the gap.

    Deterministic in (model.seed, query_id).
    """
    rng = np.random.default_rng([model.seed, _QUERY_STREAM_KEY, query_id])
    easy_draw, magnitude, base_noise, confidence_noise = (
        rng.random(),
        rng.exponential(model.quality_gap_scale),
        rng.normal(0.0, model.base_quality_sigma),
        rng.normal(0.0, model.noise_sigma),
    )

    gap = magnitude if easy_draw < model.easy_fraction else -magnitude
    quality_heavy = model.base_quality + base_noise
    quality_light = quality_heavy + gap
    confidence = _logistic(model.confidence_fidelity * gap + confidence_noise)

    return Query(
        id=query_id,
        arrival_time=float(arrival_time),
        confidence=float(confidence),
        quality_light=float(quality_light),
        quality_heavy=float(quality_heavy),
        deadline=float(arrival_time) + slo_seconds,
    )


def ewma_estimate(history: Sequence[float], alpha: float = 0.3) -> float:
    """
    Exponentially weighted moving average of observed demand.

    D_1 = obs_1; D_k = alpha * obs_k + (1 - alpha) * D_{k-1}.

    Raises:
        EstimationError: Empty history or alpha outside (0, 1]
    """
    if not history:
        raise EstimationError("Cannot estimate demand from an empty history")
    if not 0.0 < alpha <= 1.0:
        raise EstimationError(f"EWMA alpha {alpha} outside (0, 1]")

    estimate = float(history[0])
    for observed in history[1:]:
        estimate = alpha * observed + (1.0 - alpha) * estimate
    return estimate


def profile_confidences(model: QueryOutcomeModel, count: int = 1000) -> list[float]:
    """
    Offline profiling pass: confidence scores of `count` sampled queries.

    Used to seed a cascade's deferral curve when the profile file ships no
    samples. Pass a model whose seed differs from the serving stream's.
    """
    return [sample_query(model, i, 0.0, 1.0).confidence for i in range(count)]
