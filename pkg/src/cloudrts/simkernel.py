"""Deterministic discrete-event kernel.

Events are ordered by ``(fire_at, seq)``; ``seq`` is a per-engine insertion
counter, so simultaneous events dispatch in the order they were scheduled.
Randomness comes from :class:`random.Random` (Mersenne Twister) seeded with
the run seed; nothing else in a run may draw random numbers.
"""
from __future__ import annotations

import hashlib
import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

# Known payload tags. Sub-kinds are appended after a colon, e.g.
# "rescale-phase-done:restart".
EVENT_TAGS = frozenset({
    "message-arrival",
    "compute-done",
    "spot-event",
    "manager-tick",
    "rescale-phase-done",
    "workload-step",
    "instance-launched",
    "instance-terminated",
    "daemon-up",
    "migration-done",
})


class SchedulingError(RuntimeError):
    """Raised when an event is scheduled before the current clock."""


@dataclass(order=True)
class SimEvent:
    fire_at: float
    seq: int
    tag: str = field(compare=False)
    action: Optional[Callable[..., Any]] = field(default=None, compare=False, repr=False)
    args: tuple = field(default=(), compare=False, repr=False)
    cancelled: bool = field(default=False, compare=False, repr=False)

    @property
    def base_tag(self) -> str:
        return self.tag.split(":", 1)[0]


class Engine:
    """Event queue plus simulation clock.

    >>> eng = Engine(seed=1)
    >>> out = []
    >>> _ = eng.schedule_at(2.0, "workload-step", out.append, "b")
    >>> _ = eng.schedule_at(1.0, "workload-step", out.append, "a")
    >>> eng.run()
    2.0
    >>> out
    ['a', 'b']
    """

    def __init__(self, seed: int = 0, record_trace: bool = True):
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0.0
        self._queue: list[SimEvent] = []
        self._seq = 0
        self._stopped = False
        self.record_trace = record_trace
        self.trace: list[tuple[float, int, str]] = []
        self.dispatched = 0

    def __len__(self):
        return sum(1 for ev in self._queue if not ev.cancelled)

    def schedule_at(self, fire_at: float, tag: str, action=None, *args) -> SimEvent:
        if not fire_at >= self.now:
            raise SchedulingError(
                f"cannot schedule {tag!r} at t={fire_at!r}; clock is at t={self.now!r}")
        if tag.split(":", 1)[0] not in EVENT_TAGS:
            raise ValueError(f"unknown event tag {tag!r}")
        ev = SimEvent(float(fire_at), self._seq, tag, action, args)
        self._seq += 1
        heapq.heappush(self._queue, ev)
        return ev

    def schedule(self, event: SimEvent) -> SimEvent:
        """Insert a caller-built event, assigning it the next sequence number."""
        return self.schedule_at(event.fire_at, event.tag, event.action, *event.args)

    def schedule_in(self, delay: float, tag: str, action=None, *args) -> SimEvent:
        if delay < 0:
            raise SchedulingError(f"negative delay {delay!r} for {tag!r}")
        return self.schedule_at(self.now + delay, tag, action, *args)

    @staticmethod
    def cancel(event: SimEvent) -> None:
        event.cancelled = True

    def stop(self) -> None:
        """Halt :meth:`run` after the event currently being dispatched."""
        self._stopped = True

    def step(self) -> Optional[SimEvent]:
        while self._queue:
            ev = heapq.heappop(self._queue)
            if ev.cancelled:
                continue
            self.now = ev.fire_at
            self.dispatched += 1
            if self.record_trace:
                self.trace.append((ev.fire_at, ev.seq, ev.tag))
            if ev.action is not None:
                ev.action(*ev.args)
            return ev
        return None

    def run(self, until: Optional[float] = None) -> float:
        """Dispatch events in order; return the final clock.

        With ``until`` set, events strictly later than ``until`` stay queued
        and the clock is advanced to ``until``. Without it the engine runs to
        quiescence (or until :meth:`stop`).
        """
        self._stopped = False
        while self._queue and not self._stopped:
            head = self._queue[0]
            if head.cancelled:
                heapq.heappop(self._queue)
                continue
            if until is not None and head.fire_at > until:
                break
            self.step()
        if until is not None and not self._stopped and until > self.now:
            self.now = float(until)
        return self.now

    def trace_lines(self) -> list[str]:
        return [f"{t!r}\t{seq}\t{tag}" for t, seq, tag in self.trace]

    def write_trace(self, path) -> None:
        with open(path, "w") as fh:
            for line in self.trace_lines():
                fh.write(line + "\n")

    def trace_digest(self) -> str:
        h = hashlib.sha256()
        for line in self.trace_lines():
            h.update(line.encode())
            h.update(b"\n")
        return h.hexdigest()
