"""Continuous-time discrete-event core: clock, ordered event queue, seeded streams."""
from __future__ import annotations

import enum
import heapq
import math
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import ndtri


class CausalityError(ValueError):
    pass


class EmptyQueueError(IndexError):
    pass


class EventKind(enum.Enum):
    TaskGenerated = "TaskGenerated"
    TransmissionDone = "TransmissionDone"
    EdgeServiceStart = "EdgeServiceStart"
    EdgeServiceDone = "EdgeServiceDone"
    LocalDone = "LocalDone"
    WaitDone = "WaitDone"
    Deadline = "Deadline"


@dataclass(order=True, frozen=True)
class Event:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    device_id: int = field(compare=False, default=0)
    edge_id: Optional[int] = field(compare=False, default=None)
    task_id: int = field(compare=False, default=0)


class EventQueue:
    """Priority queue ordered by (time, seq); pops advance the clock."""

    def __init__(self, start: float = 0.0):
        self.clock = float(start)
        self._heap: list[Event] = []
        self._seq = 0

    def __len__(self) -> int:
        return len(self._heap)

    def schedule(self, time: float, kind: EventKind, device_id: int = 0,
                 edge_id: Optional[int] = None, task_id: int = 0) -> Event:
        time = float(time)
        if not time >= self.clock:  # also catches NaN
            raise CausalityError(f"event at t={time} precedes clock {self.clock}")
        ev = Event(time, self._seq, kind, device_id, edge_id, task_id)
        self._seq += 1
        heapq.heappush(self._heap, ev)
        return ev

    def push(self, event: Event) -> None:
        """Enqueue a pre-built event (its seq must be fresh)."""
        if not event.time >= self.clock:
            raise CausalityError(f"event at t={event.time} precedes clock {self.clock}")
        self._seq = max(self._seq, event.seq + 1)
        heapq.heappush(self._heap, event)

    def peek_time(self) -> float:
        return self._heap[0].time if self._heap else math.inf

    def pop_next(self) -> Event:
        if not self._heap:
            raise EmptyQueueError("pop from empty event queue")
        ev = heapq.heappop(self._heap)
        self.clock = ev.time
        return ev


def _stream_key(stream_id: str) -> int:
    return zlib.crc32(stream_id.encode("utf-8"))


class RngStream:
    """Independent reproducible stream keyed by (seed, label).

    Labels are hashed with crc32 so the mapping is stable across runs and
    platforms (Python's ``hash`` is salted per process).
    """

    def __init__(self, seed: int, stream_id: str):
        self.seed = int(seed)
        self.stream_id = stream_id
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, _stream_key(stream_id)])
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self) -> float:
        """Draw from the open interval (0, 1)."""
        u = self._gen.random()
        while u == 0.0:
            u = self._gen.random()
        return float(u)

    def integers(self, low: int, high: int) -> int:
        return int(self._gen.integers(low, high))


def exponential_from_uniform(rate: float, u: float) -> float:
    if rate <= 0:
        raise ValueError("rate must be positive")
    return -math.log(u) / rate


def sample_exponential(rate: float, stream: RngStream) -> float:
    """Exp(rate) draw by inverse CDF."""
    if rate <= 0:
        raise ValueError("rate must be positive")
    return exponential_from_uniform(rate, stream.uniform())


def lognormal_from_uniform(mean: float, sigma: float, u: float) -> float:
    if mean <= 0:
        raise ValueError("mean must be positive")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return float(mean)
    # mu = log(mean) - sigma^2/2 keeps the arithmetic mean fixed
    return float(mean * math.exp(sigma * float(ndtri(u)) - 0.5 * sigma * sigma))


def sample_lognormal(mean: float, variance_param: float, stream: RngStream) -> float:
    """Lognormal draw with arithmetic mean ``mean``; ``variance_param`` is the
    standard deviation of the underlying normal."""
    if mean <= 0:
        raise ValueError("mean must be positive")
    if variance_param < 0:
        raise ValueError("variance_param must be non-negative")
    if variance_param == 0:
        return float(mean)
    return lognormal_from_uniform(mean, variance_param, stream.uniform())
