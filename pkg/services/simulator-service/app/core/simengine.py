"""Deterministic discrete-event core.

A heap-ordered event queue keyed on (time, sequence_number), a virtual clock
that only moves forward, and named RNG streams so each consumer of randomness
draws from its own reproducible sequence.
"""

import logging
import math
import zlib
from collections.abc import Callable
from dataclasses import dataclass, field
from enum import Enum
from heapq import heappop, heappush
from typing import Any

import numpy as np

from ..models import SimulatorError

logger = logging.getLogger(__name__)


class SimEngineError(SimulatorError):
    """Base class for event-engine errors."""

    module = "simengine"


class CausalityError(SimEngineError):
    """An event was scheduled before the current simulated time."""


class EventHandlerError(SimEngineError):
    """A handler raised while processing an event."""

    def __init__(self, event: "Event", cause: Exception):
        super().__init__(
            f"Handler for {event.kind.value} (t={event.time:.6f}, seq={event.sequence_number}) "
            f"failed: {type(cause).__name__}: {cause}"
        )
        self.event = event


class EventKind(str, Enum):
    QUERY_ARRIVAL = "query_arrival"
    BATCH_START = "batch_start"
    BATCH_COMPLETE = "batch_complete"
    CONTROL_TICK = "control_tick"
    TRACE_END = "trace_end"


@dataclass(frozen=True, order=True)
class Event:
    """Scheduled occurrence; ordering uses (time, sequence_number) only."""

    time: float
    sequence_number: int
    kind: EventKind = field(compare=False)
    payload: Any = field(default=None, compare=False)


@dataclass
class SimClock:
    """Virtual time in seconds."""

    now: float = 0.0

    def advance_to(self, time: float) -> None:
        if time < self.now:
            raise CausalityError(f"Clock cannot move backwards from {self.now} to {time}")
        self.now = time


Handler = Callable[[Event], None]


class Simulator:
    """
    Event queue plus clock.

    Handlers are registered per EventKind and may schedule further events.
    Equal-time events run in the order they were scheduled.
    """

    def __init__(self, record_log: bool = False):
        self.clock = SimClock()
        self._queue: list[Event] = []
        self._next_sequence = 0
        self._handlers: dict[EventKind, Handler] = {}
        self.record_log = record_log
        self.event_log: list[tuple[float, int, str]] = []
        self.processed = 0

    @property
    def now(self) -> float:
        return self.clock.now

    @property
    def pending(self) -> int:
        return len(self._queue)

    def on(self, kind: EventKind, handler: Handler) -> None:
        """Register the handler for an event kind, replacing any previous one."""
        self._handlers[kind] = handler

    def schedule(self, time: float, kind: EventKind, payload: Any = None) -> Event:
        """
        Enqueue an event.

        Raises:
            CausalityError: If time is before the clock or negative
        """
        if time < self.clock.now or time < 0 or math.isnan(time):
            raise CausalityError(f"Cannot schedule {kind.value} at {time}: clock is at {self.clock.now}")
        event = Event(time=float(time), sequence_number=self._next_sequence, kind=kind, payload=payload)
        self._next_sequence += 1
        heappush(self._queue, event)
        return event

    def peek_time(self) -> float | None:
        """Time of the next pending event, if any."""
        return self._queue[0].time if self._queue else None

    def run_until(self, end_time: float) -> int:
        """
        Process events in order until the queue empties or the next event is
        later than end_time.

        The clock ends at end_time if events remain (or none ran), otherwise at
        the time of the last processed event.

        Returns:
            Number of events processed by this call

        Raises:
            CausalityError: If end_time is before the clock
            EventHandlerError: If a handler raised; carries the event
        """
        if end_time < self.clock.now:
            raise CausalityError(f"run_until({end_time}) is before clock {self.clock.now}")

        count = 0
        while self._queue and self._queue[0].time <= end_time:
            event = heappop(self._queue)
            self.clock.advance_to(event.time)
            if self.record_log:
                self.event_log.append((event.time, event.sequence_number, event.kind.value))

            handler = self._handlers.get(event.kind)
            if handler is not None:
                try:
                    handler(event)
                except Exception as e:
                    raise EventHandlerError(event, e) from e
            count += 1

        if (self._queue or count == 0) and math.isfinite(end_time):
            self.clock.advance_to(end_time)
        self.processed += count
        return count


class RngStreams:
    """
    Named, independent random streams derived from one experiment seed.

    Each name maps to a fixed spawn key, so adding a new stream never shifts
    the draws of an existing one.
    """

    def __init__(self, seed: int):
        self.seed = seed

    def seed_sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))

    def generator(self, name: str) -> np.random.Generator:
        return np.random.default_rng(self.seed_sequence(name))

    def derive_seed(self, name: str) -> int:
        """Stable 32-bit integer seed for consumers that take a plain int."""
        return int(self.seed_sequence(name).generate_state(1, dtype=np.uint32)[0])
