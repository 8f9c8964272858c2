"""Hypervisor side: load sampling, threshold wake/sleep decisions,
transition latencies and fleet/strategy configuration.

Everything here sees only what an untrusted hypervisor could see: per-vCPU
CPU time and the protocol registry. Guest queues are never consulted.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Optional, Sequence, Union

from .guest import CvmConfig, Vcpu
from .protocol import LifecycleState
from .sim_core import SECOND, US, SimTime


class Strategy(enum.Enum):
    WORKER_VCPU = "WorkerVcpu"
    HOTPLUG = "Hotplug"
    BACKUP_VCPU = "BackupVcpu"
    FIXED_COLD_START = "FixedColdStart"
    FIXED_WARM_KEEP = "FixedWarmKeep"

    @property
    def elastic(self) -> bool:
        """Strategies where the hypervisor wakes and sleeps worker vCPUs."""
        return self in (Strategy.WORKER_VCPU, Strategy.HOTPLUG)

    @property
    def container_fleet(self) -> bool:
        return self in (Strategy.FIXED_COLD_START, Strategy.FIXED_WARM_KEEP)


@dataclass(frozen=True)
class SamplerConfig:
    interval: SimTime = 2 * SECOND
    per_vm_cost: SimTime = 20 * US

    def __post_init__(self):
        if self.interval <= 0:
            raise ValueError("sampling interval must be > 0")
        if self.per_vm_cost < 0:
            raise ValueError("per_vm_cost must be >= 0")

    @property
    def overhead_fraction(self) -> Fraction:
        """Share of one interval spent sampling a single VM."""
        return Fraction(self.per_vm_cost, self.interval)


def sampler_overhead(cfg: SamplerConfig, horizon: SimTime) -> SimTime:
    return cfg.per_vm_cost * (horizon // cfg.interval)


@dataclass(frozen=True)
class SchedulerPolicy:
    wake_threshold: Fraction = Fraction(9, 10)
    sleep_threshold: Fraction = Fraction(1, 2)
    max_wakes_per_tick: int = 1
    max_sleeps_per_tick: int = 1
    scaleout_ticks: int = 1

    def __post_init__(self):
        object.__setattr__(self, "wake_threshold", Fraction(self.wake_threshold))
        object.__setattr__(self, "sleep_threshold", Fraction(self.sleep_threshold))
        if not 0 < self.wake_threshold <= 1:
            raise ValueError("wake_threshold must lie in (0, 1]")
        if not 0 <= self.sleep_threshold < 1:
            raise ValueError("sleep_threshold must lie in [0, 1)")
        if self.sleep_threshold >= self.wake_threshold:
            raise ValueError("sleep_threshold must be below wake_threshold")
        if self.max_wakes_per_tick < 0 or self.max_sleeps_per_tick < 0:
            raise ValueError("per-tick action limits must be >= 0")
        if self.scaleout_ticks < 1:
            raise ValueError("scaleout_ticks must be >= 1")


@dataclass(frozen=True)
class TransitionLatencies:
    wake: SimTime = 7 * US
    sleep: SimTime = 7 * US
    # 35,414 us round trip, split 70/30
    hotplug_add: SimTime = 24_790 * US
    hotplug_remove: SimTime = 10_624 * US
    message: SimTime = 0

    def __post_init__(self):
        for name in ("wake", "sleep", "hotplug_add", "hotplug_remove", "message"):
            if getattr(self, name) < 0:
                raise ValueError(f"latency {name} must be >= 0")

    def for_strategy(self, strategy: Strategy) -> tuple[SimTime, SimTime]:
        """(wake, sleep) latency pair used by a strategy."""
        if strategy is Strategy.HOTPLUG:
            return self.hotplug_add, self.hotplug_remove
        return self.wake, self.sleep

    def round_trip(self, strategy: Strategy) -> SimTime:
        return sum(self.for_strategy(strategy))


@dataclass(frozen=True)
class FleetConfig:
    strategy: Strategy = Strategy.WORKER_VCPU
    max_cvms: int = 1
    cvm_template: CvmConfig = CvmConfig()
    cold_boot_latency: SimTime = 15 * SECOND
    warm_pool_size: int = 0

    def __post_init__(self):
        if self.max_cvms < 1:
            raise ValueError("max_cvms must be >= 1")
        if self.warm_pool_size < 0 or self.warm_pool_size > self.max_cvms:
            raise ValueError("warm_pool_size must lie in [0, max_cvms]")
        if self.cold_boot_latency < 0:
            raise ValueError("cold_boot_latency must be >= 0")


@dataclass(frozen=True)
class LoadSample:
    cvm: str
    at: SimTime
    active_count: int
    raw_load: Fraction
    utilization: Fraction

    def __post_init__(self):
        if not 0 <= self.raw_load <= self.active_count:
            raise ValueError(f"raw_load {self.raw_load} outside [0, {self.active_count}]")


_ACTIVE = (LifecycleState.REGISTERED_MAIN, LifecycleState.WORKER_ACTIVE,
           LifecycleState.WORKER_IDLE_CHECKED_IN)


def sample(cvm_id: str, vcpus: Iterable[Vcpu], interval: SimTime, at: SimTime,
           background: Fraction = Fraction(0), background_on_workers: bool = False) -> LoadSample:
    """Sum busy time of active vCPUs over the interval, then reset every
    accumulator. Dormant workers are left out of both sum and count.

    ``background`` adds a constant housekeeping load to regular vCPUs (and
    to workers when ``background_on_workers`` is set), capped at a full
    interval per vCPU.
    """
    busy = Fraction(0)
    active = 0
    for v in vcpus:
        if v.lifecycle in _ACTIVE:
            active += 1
            own = v.busy_accumulator
            if background and (not v.is_worker or background_on_workers):
                own = min(Fraction(interval), own + background * interval)
            busy += min(Fraction(own), Fraction(interval))
        v.busy_accumulator = 0
    raw = busy / interval
    util = raw / active if active else Fraction(0)
    return LoadSample(cvm_id, at, active, raw, util)


@dataclass(frozen=True)
class WakeWorker:
    vcpu: int


@dataclass(frozen=True)
class RequestSleep:
    vcpu: int


@dataclass(frozen=True)
class ScaleOut:
    pass


Decision = Union[WakeWorker, RequestSleep, ScaleOut]


@dataclass(frozen=True)
class WorkerView:
    """What the hypervisor knows about one worker vCPU."""
    index: int
    state: LifecycleState
    pending_sleep: bool = False
    in_transition: bool = False

    @classmethod
    def of(cls, v: Vcpu) -> "WorkerView":
        return cls(v.index, v.lifecycle, v.pending_sleep, v.transition is not None)


def schedule_tick(s: LoadSample, policy: SchedulerPolicy, workers: Sequence[WorkerView],
                  overload_streak: int = 0) -> list[Decision]:
    """Threshold policy for one sampling tick.

    Wakes the lowest-index dormant worker when utilization reaches the wake
    threshold, asks the highest-index awake worker to sleep when it falls to
    the sleep threshold. A new sleep is only requested when no earlier one
    is still outstanding, so workers drain one per tick. ``overload_streak``
    counts earlier consecutive saturated ticks with nothing left to wake.
    """
    out: list[Decision] = []
    u = s.utilization
    if u >= policy.wake_threshold:
        dormant = [w for w in workers
                   if w.state is LifecycleState.WORKER_DORMANT and not w.in_transition]
        for w in dormant[:policy.max_wakes_per_tick]:
            out.append(WakeWorker(w.index))
        if not dormant and overload_streak + 1 >= policy.scaleout_ticks:
            out.append(ScaleOut())
    elif u <= policy.sleep_threshold:
        outstanding = any(w.pending_sleep or w.in_transition for w in workers)
        if not outstanding:
            awake = [w for w in workers
                     if w.state in (LifecycleState.WORKER_ACTIVE, LifecycleState.WORKER_IDLE_CHECKED_IN)]
            for w in sorted(awake, key=lambda w: -w.index)[:min(1, policy.max_sleeps_per_tick)]:
                out.append(RequestSleep(w.index))
    return out


class Scheduler:
    """Per-CVM scheduler state: the policy plus the scale-out streak."""

    def __init__(self, policy: SchedulerPolicy):
        self.policy = policy
        self.overload_streak = 0

    def tick(self, s: LoadSample, workers: Sequence[WorkerView]) -> list[Decision]:
        decisions = schedule_tick(s, self.policy, workers, self.overload_streak)
        saturated = s.utilization >= self.policy.wake_threshold and not any(
            isinstance(d, WakeWorker) for d in decisions)
        if any(isinstance(d, ScaleOut) for d in decisions):
            self.overload_streak = 0
        elif saturated:
            self.overload_streak += 1
        else:
            self.overload_streak = 0
        return decisions


def on_checkin(v: Vcpu) -> Optional[str]:
    """Return "sleep" when a checked-in worker has a sleep request waiting."""
    if v.lifecycle is LifecycleState.WORKER_IDLE_CHECKED_IN and v.pending_sleep:
        return "sleep"
    return None
