"""Guest side of an elastic CVM: vCPU partitioning, worker threads, task
placement and busy-time accounting.

The guest never decides when a worker sleeps. It only reports idleness
(CHECKIN) and refuses to pick up new work once a sleep is pending.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

from .protocol import LifecycleState, MessageKind, ProtocolMessage, VcpuKind
from .sim_core import SimTime
from .workload import Task


class OwnerMismatch(ValueError):
    pass


class NotBooted(RuntimeError):
    pass


class TasksPending(RuntimeError):
    pass


@dataclass(frozen=True)
class CvmConfig:
    regular_vcpus: int = 1
    worker_vcpus: int = 0
    boot_latency: SimTime = 0
    owner: str = "u0"

    def __post_init__(self):
        if self.regular_vcpus < 1:
            raise ValueError("a CVM needs at least one regular vCPU")
        if self.worker_vcpus < 0:
            raise ValueError("worker_vcpus must be >= 0")
        if self.boot_latency < 0:
            raise ValueError("boot_latency must be >= 0")

    @property
    def total_vcpus(self) -> int:
        return self.regular_vcpus + self.worker_vcpus


class WorkerMask:
    """Bitmap of worker vCPU indices; workers sit at [m, m+n)."""

    def __init__(self, bits: int, width: int):
        self.bits = bits
        self.width = width

    @classmethod
    def for_config(cls, cfg: CvmConfig) -> "WorkerMask":
        bits = ((1 << cfg.worker_vcpus) - 1) << cfg.regular_vcpus
        return cls(bits, cfg.total_vcpus)

    def is_worker(self, idx: int) -> bool:
        return bool(self.bits >> idx & 1)

    def count(self) -> int:
        return bin(self.bits).count("1")

    def __str__(self) -> str:
        return format(self.bits, f"0{self.width}b")[::-1]


@dataclass
class WorkerThread:
    id: int
    home_vcpu: int
    queue: deque = field(default_factory=deque)


@dataclass
class Vcpu:
    cvm: str
    index: int
    kind: VcpuKind
    lifecycle: LifecycleState = LifecycleState.UNREGISTERED
    pending_sleep: bool = False
    thread: Optional[WorkerThread] = None
    run_list: deque = field(default_factory=deque)
    current: Optional[Task] = None
    remaining: SimTime = 0
    last_account: SimTime = 0
    busy_accumulator: SimTime = 0
    # "wake" / "sleep" while a hypervisor transition is in flight
    transition: Optional[str] = None
    # messages emitted by this vCPU and not yet delivered
    in_flight: int = 0
    done_event: Optional[int] = None

    @property
    def vid(self) -> str:
        return f"{self.cvm}.v{self.index}"

    @property
    def is_worker(self) -> bool:
        return self.kind is VcpuKind.WORKER

    @property
    def queue(self) -> deque:
        return self.thread.queue if self.thread is not None else self.run_list

    @property
    def load(self) -> int:
        return len(self.queue) + (1 if self.current is not None else 0)

    @property
    def executing(self) -> bool:
        return self.current is not None

    def can_execute(self) -> bool:
        return (self.transition is None and self.in_flight == 0
                and self.lifecycle in (LifecycleState.REGISTERED_MAIN,
                                       LifecycleState.WORKER_ACTIVE,
                                       LifecycleState.WORKER_IDLE_CHECKED_IN))


@dataclass(frozen=True)
class PlacementRecord:
    cvm: str
    vcpu: Optional[int]  # None when parked on the CVM's shared queue
    task: int


def advance_execution(v: Vcpu, until: SimTime) -> SimTime:
    """Accrue busy time for the running task up to ``until``; returns the delta."""
    if until < v.last_account:
        raise ValueError(f"{v.vid}: accounting moved backwards ({until} < {v.last_account})")
    delta = 0
    if v.current is not None:
        delta = min(v.remaining, until - v.last_account)
        v.remaining -= delta
        v.busy_accumulator += delta
    v.last_account = until
    return delta


class Cvm:
    def __init__(self, cvm_id: str, config: CvmConfig, launched_at: SimTime = 0,
                 dispatch_on_checkin: bool = False):
        self.id = cvm_id
        self.config = config
        self.mask = WorkerMask.for_config(config)
        self.launched_at = launched_at
        self.dispatch_on_checkin = dispatch_on_checkin
        self.booted = False
        self.shut_down = False
        self.shared_queue: deque = deque()
        self.vcpus: list[Vcpu] = []
        for i in range(config.total_vcpus):
            kind = VcpuKind.WORKER if self.mask.is_worker(i) else VcpuKind.REGULAR
            v = Vcpu(cvm_id, i, kind, last_account=launched_at)
            if kind is VcpuKind.WORKER:
                v.thread = WorkerThread(i - config.regular_vcpus, i)
            self.vcpus.append(v)
        # container-fleet bookkeeping
        self.function: Optional[str] = None
        self.single_use = False
        self.persistent = True
        self.tasks_run = 0
        self.reserved_for: Optional[int] = None

    @property
    def owner(self) -> str:
        return self.config.owner

    @property
    def regulars(self) -> list[Vcpu]:
        return [v for v in self.vcpus if not v.is_worker]

    @property
    def workers(self) -> list[Vcpu]:
        return [v for v in self.vcpus if v.is_worker]

    @property
    def load(self) -> int:
        return sum(v.load for v in self.vcpus) + len(self.shared_queue)

    @property
    def idle(self) -> bool:
        return self.load == 0

    def boot_messages(self) -> list[ProtocolMessage]:
        msgs = [ProtocolMessage(MessageKind.REG_MAIN, self.id, v.index) for v in self.regulars]
        msgs += [ProtocolMessage(MessageKind.REG_WORKER, self.id, v.index) for v in self.workers]
        return msgs

    def bind_task(self, task: Task) -> PlacementRecord:
        """Choose the vCPU queue for an arriving task.

        An idle regular vCPU wins; otherwise the least-loaded vCPU, lowest
        index on ties. In dispatch-on-checkin mode surplus tasks wait on a
        shared queue that any running vCPU drains.
        """
        if task.user != self.owner:
            raise OwnerMismatch(f"task {task.id} of {task.user} cannot run in {self.id} owned by {self.owner}")
        if not self.booted:
            raise NotBooted(f"{self.id} has not finished booting")
        for v in self.regulars:
            if v.load == 0:
                v.queue.append(task)
                return PlacementRecord(self.id, v.index, task.id)
        if self.dispatch_on_checkin:
            for v in self.workers:
                if v.load == 0 and v.lifecycle is LifecycleState.WORKER_IDLE_CHECKED_IN \
                        and v.can_execute() and not v.pending_sleep:
                    v.queue.append(task)
                    return PlacementRecord(self.id, v.index, task.id)
            self.shared_queue.append(task)
            return PlacementRecord(self.id, None, task.id)
        target = min(self.vcpus, key=lambda v: (v.load, v.index))
        target.queue.append(task)
        return PlacementRecord(self.id, target.index, task.id)

    def next_task(self, v: Vcpu) -> Optional[Task]:
        """Work a vCPU should pick up after finishing (or waking), if any.

        A worker with a pending sleep takes nothing; it must check in.
        """
        if v.is_worker and v.pending_sleep:
            return None
        if v.queue:
            return v.queue.popleft()
        if self.shared_queue:
            return self.shared_queue.popleft()
        return None

    def drain_queue(self, v: Vcpu) -> list[Task]:
        """Remove and return a vCPU's waiting tasks (hot-unplug migration)."""
        moved = list(v.queue)
        v.queue.clear()
        return moved

    def shutdown_messages(self) -> list[ProtocolMessage]:
        if any(v.load for v in self.vcpus) or self.shared_queue:
            raise TasksPending(f"{self.id} still has queued or running tasks")
        msgs = [ProtocolMessage(MessageKind.DEREG_WORKER, self.id, v.index) for v in self.workers]
        msgs.append(ProtocolMessage(MessageKind.DEREGISTER, self.id))
        return msgs
