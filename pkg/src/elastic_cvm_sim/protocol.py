"""CVM-hypervisor control messages and the worker vCPU lifecycle.

The legal transition relation lives in one table. Both guest messages and
hypervisor actions are checked against it, so an illegal action (for
example stopping a worker that has not checked in) raises instead of
silently corrupting state.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional


class VcpuKind(enum.Enum):
    REGULAR = "regular"
    WORKER = "worker"


class LifecycleState(enum.Enum):
    UNREGISTERED = "Unregistered"
    REGISTERED_MAIN = "RegisteredMain"
    WORKER_ACTIVE = "WorkerActive"
    WORKER_IDLE_CHECKED_IN = "WorkerIdleCheckedIn"
    WORKER_DORMANT = "WorkerDormant"
    DEREGISTERED = "Deregistered"


class MessageKind(enum.Enum):
    REG_MAIN = "REG_MAIN"
    REG_WORKER = "REG_WORKER"
    CHECKIN = "CHECKIN"
    DEREG_WORKER = "DEREG_WORKER"
    DEREGISTER = "DEREGISTER"


class Action(enum.Enum):
    WAKE = "Wake"
    SLEEP = "Sleep"
    # guest-local: a checked-in worker picks up newly queued work
    RESUME = "Resume"


S = LifecycleState
M = MessageKind
A = Action

REGULAR_STATES = frozenset({S.UNREGISTERED, S.REGISTERED_MAIN, S.DEREGISTERED})
WORKER_STATES = frozenset(
    {S.UNREGISTERED, S.WORKER_ACTIVE, S.WORKER_IDLE_CHECKED_IN, S.WORKER_DORMANT, S.DEREGISTERED}
)
STATES_BY_KIND = {VcpuKind.REGULAR: REGULAR_STATES, VcpuKind.WORKER: WORKER_STATES}

_TABLE = frozenset({
    (S.UNREGISTERED, M.REG_MAIN, S.REGISTERED_MAIN),
    (S.UNREGISTERED, M.REG_WORKER, S.WORKER_ACTIVE),
    (S.WORKER_ACTIVE, M.CHECKIN, S.WORKER_IDLE_CHECKED_IN),
    (S.WORKER_ACTIVE, M.DEREG_WORKER, S.DEREGISTERED),
    (S.WORKER_IDLE_CHECKED_IN, M.DEREG_WORKER, S.DEREGISTERED),
    (S.WORKER_DORMANT, M.DEREG_WORKER, S.DEREGISTERED),
    (S.REGISTERED_MAIN, M.DEREGISTER, S.DEREGISTERED),
    (S.DEREGISTERED, M.DEREGISTER, S.DEREGISTERED),
    (S.WORKER_DORMANT, A.WAKE, S.WORKER_ACTIVE),
    # sleep on a running worker only arms pending_sleep
    (S.WORKER_ACTIVE, A.SLEEP, S.WORKER_ACTIVE),
    (S.WORKER_IDLE_CHECKED_IN, A.SLEEP, S.WORKER_DORMANT),
    (S.WORKER_IDLE_CHECKED_IN, A.RESUME, S.WORKER_ACTIVE),
})
_NEXT = {(s, i): n for s, i, n in _TABLE}


def transition_table() -> frozenset:
    """Return the full legal relation as ``(state, input, next_state)`` triples."""
    return _TABLE


class ProtocolViolation(Exception):
    def __init__(self, state, inp, detail: str = ""):
        self.state = state
        self.input = inp
        name = getattr(inp, "value", inp)
        sname = getattr(state, "value", state)
        super().__init__(f"illegal input {name} in state {sname}" + (f": {detail}" if detail else ""))


def next_state(kind: VcpuKind, state: LifecycleState, inp) -> LifecycleState:
    """Look up the successor for one vCPU, raising on anything outside the table."""
    if state not in STATES_BY_KIND[kind]:
        raise ProtocolViolation(state, inp, f"state not reachable for a {kind.value} vCPU")
    nxt = _NEXT.get((state, inp))
    if nxt is None or nxt not in STATES_BY_KIND[kind]:
        raise ProtocolViolation(state, inp)
    return nxt


@dataclass(frozen=True)
class ProtocolMessage:
    kind: MessageKind
    cvm: str
    vcpu: Optional[int] = None

    def __post_init__(self):
        if self.kind is MessageKind.DEREGISTER:
            if self.vcpu is not None:
                raise ValueError("DEREGISTER carries no vCPU identity")
        elif self.vcpu is None:
            raise ValueError(f"{self.kind.value} requires a vCPU identity")


@dataclass
class RegistryEntry:
    kind: VcpuKind
    state: LifecycleState = LifecycleState.UNREGISTERED
    pending_sleep: bool = False


@dataclass(frozen=True)
class RegistryDelta:
    cvm: str
    changes: tuple  # ((vcpu, before, after, pending_sleep_after), ...)
    remove_cvm: bool = False
    inp: object = None


class VcpuRegistry:
    """Hypervisor-side view of every registered CVM's vCPUs."""

    def __init__(self):
        self.cvms: dict[str, dict[int, RegistryEntry]] = {}

    def add_cvm(self, cvm: str, kinds: list[VcpuKind]) -> None:
        if cvm in self.cvms:
            raise ValueError(f"CVM {cvm} already known")
        self.cvms[cvm] = {i: RegistryEntry(k) for i, k in enumerate(kinds)}

    def entry(self, cvm: str, vcpu: int) -> RegistryEntry:
        return self.cvms[cvm][vcpu]

    def state(self, cvm: str, vcpu: int) -> LifecycleState:
        return self.cvms[cvm][vcpu].state

    def apply(self, delta: RegistryDelta) -> None:
        if delta.remove_cvm:
            del self.cvms[delta.cvm]
            return
        for vcpu, _before, after, pending in delta.changes:
            e = self.cvms[delta.cvm][vcpu]
            e.state = after
            e.pending_sleep = pending


def _lookup(registry: VcpuRegistry, cvm: str, vcpu, inp) -> RegistryEntry:
    entries = registry.cvms.get(cvm)
    if entries is None:
        raise ProtocolViolation(None, inp, f"unknown CVM {cvm}")
    if vcpu not in entries:
        raise ProtocolViolation(None, inp, f"unknown vCPU {cvm}/{vcpu}")
    return entries[vcpu]


def handle_message(registry: VcpuRegistry, msg: ProtocolMessage) -> RegistryDelta:
    """Compute the registry change caused by a guest message. Does not mutate."""
    if msg.kind is MessageKind.DEREGISTER:
        entries = registry.cvms.get(msg.cvm)
        if entries is None:
            raise ProtocolViolation(None, msg.kind, f"unknown CVM {msg.cvm}")
        changes = []
        for idx, e in entries.items():
            after = next_state(e.kind, e.state, msg.kind)
            changes.append((idx, e.state, after, False))
        return RegistryDelta(msg.cvm, tuple(changes), remove_cvm=True, inp=msg.kind)

    e = _lookup(registry, msg.cvm, msg.vcpu, msg.kind)
    after = next_state(e.kind, e.state, msg.kind)
    # pending_sleep survives CHECKIN so the hypervisor can consume it
    pending = e.pending_sleep if after is LifecycleState.WORKER_IDLE_CHECKED_IN else False
    return RegistryDelta(msg.cvm, ((msg.vcpu, e.state, after, pending),), inp=msg.kind)


def hypervisor_transition(registry: VcpuRegistry, cvm: str, vcpu: int, action: Action) -> RegistryDelta:
    """Wake or sleep a worker. Sleep on a running worker only arms pending_sleep."""
    e = _lookup(registry, cvm, vcpu, action)
    if e.kind is not VcpuKind.WORKER:
        raise ProtocolViolation(e.state, action, "not a worker vCPU")
    after = next_state(e.kind, e.state, action)
    if action is Action.SLEEP and after is LifecycleState.WORKER_ACTIVE:
        pending = True
    elif after is LifecycleState.WORKER_DORMANT:
        pending = False
    else:
        pending = e.pending_sleep
    return RegistryDelta(cvm, ((vcpu, e.state, after, pending),), inp=action)


def guest_resume(registry: VcpuRegistry, cvm: str, vcpu: int) -> RegistryDelta:
    e = _lookup(registry, cvm, vcpu, Action.RESUME)
    if e.pending_sleep:
        raise ProtocolViolation(e.state, Action.RESUME, "sleep pending")
    after = next_state(e.kind, e.state, Action.RESUME)
    return RegistryDelta(cvm, ((vcpu, e.state, after, False),), inp=Action.RESUME)
