"""Deterministic discrete-event engine.

All times are integer microseconds (``SimTime``).  Events that fire at the
same instant are delivered in insertion order.
"""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass
from typing import Any, Callable, Optional

US_PER_MS = 1000
US_PER_S = 1_000_000


def ms(value: float) -> int:
    """Convert milliseconds to integer microseconds."""
    return int(round(value * US_PER_MS))


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


class Event:
    __slots__ = ("fire_at", "seq", "target", "kind", "callback", "args", "cancelled")

    def __init__(self, fire_at: int, seq: int, target: str, kind: str,
                 callback: Callable[..., Any], args: tuple):
        self.fire_at = fire_at
        self.seq = seq
        self.target = target
        self.kind = kind
        self.callback = callback
        self.args = args
        self.cancelled = False

    def __lt__(self, other: "Event") -> bool:
        if self.fire_at != other.fire_at:
            return self.fire_at < other.fire_at
        return self.seq < other.seq

    def cancel(self) -> None:
        self.cancelled = True

    def __repr__(self) -> str:
        return f"Event({self.fire_at}, {self.seq}, {self.target!r}, {self.kind!r})"


class RngStream:
    """Named pseudo-random stream.

    The generator is seeded from ``"<seed>:<stream_id>"``; Python seeds
    ``random.Random`` from strings through SHA-512, so sequences are stable
    across platforms and independent of other streams.
    """

    def __init__(self, seed: int, stream_id: str):
        self.stream_id = stream_id
        self._gen = random.Random(f"{seed}:{stream_id}")

    def uniform_int(self, lo: int, hi: int) -> int:
        """Integer uniform on the closed range [lo, hi]."""
        if hi <= lo:
            return lo
        return self._gen.randint(lo, hi)

    def random(self) -> float:
        return self._gen.random()

    def bernoulli(self, p: float) -> bool:
        if p <= 0.0:
            return False
        return self._gen.random() < p

    def expovariate(self, rate: float) -> float:
        return self._gen.expovariate(rate)

    def choice(self, seq):
        return self._gen.choice(seq)


@dataclass
class EngineStats:
    events_fired: int
    clock: int


class Engine:
    """Time-ordered event queue with a monotone clock and seeded RNG streams."""

    def __init__(self, seed: int = 0, trace: bool = False):
        self.seed = seed
        self.now = 0
        self._queue: list[Event] = []
        self._seq = 0
        self._streams: dict[str, RngStream] = {}
        self.events_fired = 0
        self.trace_enabled = trace
        self.trace: list[str] = []

    def schedule(self, fire_at: int, target: str, kind: str,
                 callback: Callable[..., Any], *args: Any) -> Event:
        if fire_at < self.now:
            raise SchedulingError(
                f"event {target}/{kind} scheduled at {fire_at} us, clock is {self.now} us")
        ev = Event(fire_at, self._seq, target, kind, callback, args)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def after(self, delay: int, target: str, kind: str,
              callback: Callable[..., Any], *args: Any) -> Event:
        return self.schedule(self.now + delay, target, kind, callback, *args)

    def rng(self, stream_id: str) -> RngStream:
        stream = self._streams.get(stream_id)
        if stream is None:
            stream = self._streams[stream_id] = RngStream(self.seed, stream_id)
        return stream

    def run_until(self, end: int) -> EngineStats:
        queue = self._queue
        pop = heapq.heappop
        tracing = self.trace_enabled
        fired = 0
        while queue and queue[0].fire_at <= end:
            ev = pop(queue)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            if tracing:
                self.trace.append(f"{ev.fire_at}\t{ev.seq}\t{ev.target}\t{ev.kind}")
            ev.callback(*ev.args)
            fired += 1
        # clock never passes `end`; it stops at the last event if the queue drains
        if queue:
            self.now = max(self.now, end)
        self.events_fired += fired
        return EngineStats(fired, self.now)

    def pending(self) -> int:
        return sum(1 for ev in self._queue if not ev.cancelled)

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace:
                fh.write(line + "\n")
