"""Task streams: synchronized batches, same-function bursts, Poisson arrivals."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

from .sim_core import SECOND, SimTime


@dataclass(frozen=True)
class Task:
    id: int
    duration: SimTime
    arrival: SimTime
    user: str = "u0"
    function: str = "f0"
    # extension hook; generated tasks never depend on one another
    depends_on: tuple = ()

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError(f"task {self.id}: duration must be positive")


@dataclass(frozen=True)
class WorkloadSpec:
    kind: Literal["batch", "burst", "poisson"]
    count: int = 1
    duration: SimTime = 10 * SECOND
    start: SimTime = 0
    user: str = "u0"
    function: str = "f0"
    distinct_functions: bool = False
    rate: float = 1.0  # arrivals per second, poisson only
    horizon: Optional[SimTime] = None  # poisson only

    def __post_init__(self):
        if self.kind not in ("batch", "burst", "poisson"):
            raise ValueError(f"unknown workload kind {self.kind!r}")
        if self.kind == "poisson":
            if self.rate <= 0:
                raise ValueError("poisson rate must be > 0")
            if self.horizon is None:
                raise ValueError("poisson workload needs a horizon")
        elif self.count < 0:
            raise ValueError("count must be >= 0")
        if self.duration <= 0:
            raise ValueError("duration must be > 0")


def _jittered(duration: SimTime, jitter: float, rng) -> SimTime:
    if not jitter:
        return duration
    scale = 1.0 + rng.uniform(-jitter, jitter)
    return max(1, int(round(duration * scale)))


def generate(spec: WorkloadSpec, rng: np.random.Generator | None = None,
             jitter: float = 0.0) -> list[Task]:
    """Expand a workload description into tasks ordered by (arrival, id).

    ``rng`` is only consulted for Poisson inter-arrivals and for duration
    jitter, so batch and burst streams without jitter are seed independent.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    tasks: list[Task] = []
    if spec.kind in ("batch", "burst"):
        for i in range(spec.count):
            fn = f"{spec.function}-{i}" if spec.distinct_functions else spec.function
            tasks.append(Task(i, _jittered(spec.duration, jitter, rng), spec.start,
                              spec.user, fn))
        return tasks

    t = float(spec.start)
    end = spec.start + spec.horizon
    mean_gap_us = SECOND / spec.rate
    i = 0
    while True:
        t += rng.exponential(mean_gap_us)
        at = int(t)
        if at >= end:
            break
        fn = f"{spec.function}-{i}" if spec.distinct_functions else spec.function
        tasks.append(Task(i, _jittered(spec.duration, jitter, rng), at, spec.user, fn))
        i += 1
    return tasks


def offered_work(tasks: list[Task]) -> SimTime:
    return sum(t.duration for t in tasks)


def admissible_on(task: Task, strategy=None) -> bool:
    """Worker vCPUs only suit stateless, independent tasks."""
    return not task.depends_on
