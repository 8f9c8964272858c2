"""Deterministic discrete-event engine.

Time is an integer count of microseconds. Events are ordered by
``(at, seq)`` where ``seq`` is assigned at schedule time, so simultaneous
events dispatch in insertion order.
"""
from __future__ import annotations

import enum
import heapq
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

SimTime = int

US = 1
MS = 1_000
SECOND = 1_000_000


class SchedulingInPast(ValueError):
    pass


class EventKind(enum.Enum):
    TASK_ARRIVAL = "TaskArrival"
    SAMPLING_TICK = "SamplingTick"
    TRANSITION_DONE = "TransitionDone"
    TASK_DONE = "TaskDone"
    BOOT_DONE = "BootDone"
    MESSAGE_DELIVERY = "MessageDelivery"
    SHUTDOWN_REQUEST = "ShutdownRequest"


@dataclass(frozen=True, order=True)
class Event:
    at: SimTime
    seq: int
    kind: EventKind = field(compare=False)
    target: Any = field(default=None, compare=False)
    data: Any = field(default=None, compare=False)


@dataclass(frozen=True)
class SimStats:
    events_processed: int
    final_time: SimTime
    seed: int


Handler = Callable[[Event], None]


class Engine:
    """Single-threaded event loop with a virtual clock and one seeded RNG."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self._now: SimTime = 0
        self._queue: list[Event] = []
        self._next_seq = 0
        self._cancelled: set[int] = set()
        self._pending: set[int] = set()
        self._handlers: dict[EventKind, Handler] = {}
        self._stopped = False
        self.events_processed = 0
        self.dispatch_log: list[Event] | None = None

    def now(self) -> SimTime:
        return self._now

    def on(self, kind: EventKind, handler: Handler) -> None:
        self._handlers[kind] = handler

    def schedule(self, kind: EventKind, at: SimTime, target: Any = None, data: Any = None) -> int:
        if at < self._now:
            raise SchedulingInPast(f"cannot schedule {kind.value} at {at} (now={self._now})")
        ev = Event(int(at), self._next_seq, kind, target, data)
        self._next_seq += 1
        heapq.heappush(self._queue, ev)
        self._pending.add(ev.seq)
        return ev.seq

    def after(self, delay: SimTime, kind: EventKind, target: Any = None, data: Any = None) -> int:
        return self.schedule(kind, self._now + delay, target, data)

    def cancel(self, event_id: int) -> bool:
        if event_id not in self._pending:
            return False
        self._pending.discard(event_id)
        self._cancelled.add(event_id)
        return True

    def stop(self) -> None:
        """Stop the run loop after the current dispatch returns."""
        self._stopped = True

    def has_pending(self, *kinds: EventKind) -> bool:
        return any(ev.seq in self._pending and ev.kind in kinds for ev in self._queue)

    def run(self, until: SimTime | None = None) -> SimStats:
        self._stopped = False
        while self._queue and not self._stopped:
            ev = self._queue[0]
            if ev.seq in self._cancelled:
                heapq.heappop(self._queue)
                self._cancelled.discard(ev.seq)
                continue
            if until is not None and ev.at > until:
                break
            heapq.heappop(self._queue)
            self._pending.discard(ev.seq)
            self._now = ev.at
            self.events_processed += 1
            if self.dispatch_log is not None:
                self.dispatch_log.append(ev)
            handler = self._handlers.get(ev.kind)
            if handler is not None:
                handler(ev)
        if until is not None and until > self._now and not self._stopped:
            self._now = until
        return SimStats(self.events_processed, self._now, self.seed)
