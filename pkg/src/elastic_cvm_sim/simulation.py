"""Wires guest CVMs, the hypervisor scheduler and the fleet into one engine run."""
from __future__ import annotations

import dataclasses
import logging
from collections import deque
from fractions import Fraction
from typing import Optional

from .guest import Cvm, CvmConfig, Vcpu, advance_execution
from .hypervisor import (RequestSleep, ScaleOut, Scheduler, Strategy, WakeWorker,
                         WorkerView, on_checkin, sample)
from .metrics import RunReport, SegState, TaskRecord, Timeline, TimelineSegment
from .protocol import (Action, LifecycleState, MessageKind, ProtocolMessage, VcpuRegistry,
                       guest_resume, handle_message, hypervisor_transition)
from .scenario import Scenario
from .sim_core import Engine, EventKind, SimTime
from .workload import Task, generate

log = logging.getLogger(__name__)

L = LifecycleState

# sampling ticks allowed after the last task before forcing shutdown
EPILOGUE_TICK_CAP = 64
# consecutive ticks with queued work but nothing able to run it
STALL_TICKS = 16


class SimulationError(RuntimeError):
    pass


class Simulation:
    def __init__(self, scenario: Scenario, record_dispatch: bool = False):
        self.scenario = scenario
        self.strategy = scenario.strategy
        self.policy = scenario.scheduler.policy()
        self.sampler_cfg = scenario.scheduler.sampler()
        self.latencies = scenario.latencies.build()
        self.fleet_cfg = scenario.fleet.build()
        self.flags = scenario.flags
        self.background = Fraction(str(self.flags.background_utilization))
        self.wake_lat, self.sleep_lat = self.latencies.for_strategy(self.strategy)

        self.engine = Engine(scenario.seed)
        if record_dispatch:
            self.engine.dispatch_log = []
        self.registry = VcpuRegistry()
        self.timeline = Timeline()
        self.cvms: dict[str, Cvm] = {}
        self._open: dict[str, tuple] = {}
        self._dead: set[str] = set()
        self.fleet_queue: deque = deque()
        self.schedulers: dict[str, Scheduler] = {}
        self.tick_events: dict[str, int] = {}
        self.ticks: dict[str, int] = {}
        self.sampling: set[str] = set()

        self.tasks: list[Task] = []
        self.started: dict[int, SimTime] = {}
        self.finished: dict[int, SimTime] = {}
        self.remaining: dict[int, SimTime] = {}
        self.outstanding = 0
        self.arrivals_pending = 0

        self.messages: list[tuple] = []
        self.transitions: list[tuple] = []
        self.wake_latencies: list[SimTime] = []
        self.sleep_latencies: list[SimTime] = []
        self.boot_latencies: list[SimTime] = []
        self.rejected_launches = 0
        self.ready_at: Optional[SimTime] = None
        self._transition_start: dict[str, SimTime] = {}
        self._done_at: Optional[SimTime] = None
        self._epilogue_ticks = 0
        self._stall_ticks = 0
        self.complete = True
        self._finished_run = False

        e = self.engine
        e.on(EventKind.TASK_ARRIVAL, self._on_arrival)
        e.on(EventKind.BOOT_DONE, self._on_boot_done)
        e.on(EventKind.TASK_DONE, self._on_task_done)
        e.on(EventKind.TRANSITION_DONE, self._on_transition_done)
        e.on(EventKind.SAMPLING_TICK, self._on_tick)
        e.on(EventKind.MESSAGE_DELIVERY, self._on_delivery)
        e.on(EventKind.SHUTDOWN_REQUEST, self._on_shutdown_request)

    # ----------------------------------------------------------------- setup

    @property
    def now(self) -> SimTime:
        return self.engine.now()

    def run(self) -> RunReport:
        sc = self.scenario
        self.tasks = generate(sc.workload.build(), self.engine.rng, self.flags.duration_jitter)
        self.outstanding = len(self.tasks)
        self.arrivals_pending = len(self.tasks)

        if self.strategy.container_fleet:
            for _ in range(self.fleet_cfg.warm_pool_size):
                tmpl = dataclasses.replace(self.fleet_cfg.cvm_template, boot_latency=0)
                self.launch_cvm(tmpl, persistent=True)
        else:
            for c in sc.cvms:
                self.launch_cvm(c.build(), persistent=True)

        for t in self.tasks:
            self.engine.schedule(EventKind.TASK_ARRIVAL, t.arrival, data=t)

        if not self.tasks and sc.horizon is None:
            # nothing to run: boot, then shut down once everything is registered
            for cvm in list(self.cvms.values()):
                self.engine.schedule(EventKind.SHUTDOWN_REQUEST, cvm.config.boot_latency, target=cvm.id)

        stats = self.engine.run(until=sc.horizon)
        if self.outstanding:
            self.complete = False
        return self._finalize(stats.events_processed)

    def launch_cvm(self, cfg: CvmConfig, persistent: bool = True, single_use: bool = False,
                   function: Optional[str] = None) -> Cvm:
        cid = f"cvm{len(self.cvms)}"
        cvm = Cvm(cid, cfg, launched_at=self.now, dispatch_on_checkin=self.flags.dispatch_on_checkin)
        cvm.single_use = single_use
        cvm.function = function
        cvm.persistent = persistent
        self.cvms[cid] = cvm
        self.registry.add_cvm(cid, [v.kind for v in cvm.vcpus])
        for v in cvm.vcpus:
            self.timeline.birth(v.vid, self.now, v.kind.value)
            self._open[v.vid] = (SegState.BOOTING, None, self.now)
        self.boot_latencies.append(cfg.boot_latency)
        if self.strategy.elastic:
            self.schedulers[cid] = Scheduler(self.policy)
        self.engine.after(cfg.boot_latency, EventKind.BOOT_DONE, target=cid)
        log.debug("launch %s m=%d n=%d boot=%d", cid, cfg.regular_vcpus, cfg.worker_vcpus, cfg.boot_latency)
        return cvm

    def live_cvms(self) -> list[Cvm]:
        return [c for c in self.cvms.values() if not c.shut_down]

    # -------------------------------------------------------------- timeline

    def _seg_state(self, cvm: Cvm, v: Vcpu) -> tuple:
        if not cvm.booted:
            return (SegState.BOOTING, None)
        if v.transition == "wake":
            return (SegState.TRANSITION_WAKE, None)
        if v.transition == "sleep":
            return (SegState.TRANSITION_SLEEP, None)
        if v.lifecycle is L.WORKER_DORMANT:
            return (SegState.DORMANT, None)
        if v.current is not None:
            return (SegState.ACTIVE_BUSY, v.current.id)
        return (SegState.ACTIVE_IDLE, None)

    def _refresh(self, v: Vcpu) -> None:
        if v.vid in self._dead:
            return
        state, task = self._seg_state(self.cvms[v.cvm], v)
        cur_state, cur_task, since = self._open[v.vid]
        if (state, task) == (cur_state, cur_task):
            return
        if self.now > since:
            self.timeline.record(TimelineSegment(v.vid, cur_state, since, self.now, cur_task, v.kind.value))
        else:
            # zero-length flicker: reopen the previous segment if it matches
            segs = self.timeline.segments[v.vid]
            if segs and (segs[-1].state, segs[-1].task) == (state, task):
                self._open[v.vid] = (state, task, segs.pop().start)
                return
        self._open[v.vid] = (state, task, self.now)

    def _close(self, v: Vcpu) -> None:
        if v.vid in self._dead:
            return
        cur_state, cur_task, since = self._open.pop(v.vid)
        if self.now > since:
            self.timeline.record(TimelineSegment(v.vid, cur_state, since, self.now, cur_task, v.kind.value))
        self._dead.add(v.vid)

    # -------------------------------------------------------------- protocol

    def _apply(self, delta) -> None:
        self.registry.apply(delta)
        cvm = self.cvms[delta.cvm]
        inp = delta.inp.value
        for idx, before, after, pending in delta.changes:
            v = cvm.vcpus[idx]
            v.lifecycle = after
            v.pending_sleep = pending
            self.transitions.append((self.now, delta.cvm, idx, before.value, inp, after.value))
            self._refresh(v)

    def send(self, msg: ProtocolMessage) -> None:
        self.messages.append((self.now, msg.cvm, msg.vcpu, msg.kind.value))
        if self.latencies.message == 0:
            self._deliver(msg)
            return
        if msg.vcpu is not None:
            self.cvms[msg.cvm].vcpus[msg.vcpu].in_flight += 1
        self.engine.after(self.latencies.message, EventKind.MESSAGE_DELIVERY, target=msg.cvm, data=msg)

    def _on_delivery(self, ev) -> None:
        msg = ev.data
        if msg.vcpu is not None:
            self.cvms[msg.cvm].vcpus[msg.vcpu].in_flight -= 1
        self._deliver(msg)
        if msg.vcpu is not None and msg.kind is not MessageKind.DEREG_WORKER:
            v = self.cvms[msg.cvm].vcpus[msg.vcpu]
            if v.lifecycle is not L.WORKER_DORMANT and v.transition is None:
                self.try_start(v)

    def _deliver(self, msg: ProtocolMessage) -> None:
        cvm = self.cvms[msg.cvm]
        delta = handle_message(self.registry, msg)
        if delta.remove_cvm:
            self.registry.apply(delta)
            for idx, before, after, _ in delta.changes:
                cvm.vcpus[idx].lifecycle = after
                self.transitions.append((self.now, msg.cvm, idx, before.value, msg.kind.value, after.value))
            return
        self._apply(delta)
        v = cvm.vcpus[msg.vcpu]
        if msg.kind is MessageKind.REG_WORKER and self.strategy.elastic:
            # freshly registered workers are parked until load calls for them
            self._apply(hypervisor_transition(self.registry, cvm.id, v.index, Action.SLEEP))
        elif msg.kind is MessageKind.CHECKIN and on_checkin(v) == "sleep":
            self.begin_sleep(v)

    # ------------------------------------------------------------ execution

    def try_start(self, v: Vcpu) -> None:
        """Let an awake vCPU pick up its next task, or report idleness."""
        if v.current is not None or not v.can_execute():
            return
        cvm = self.cvms[v.cvm]
        task = cvm.next_task(v)
        if task is not None:
            if v.lifecycle is L.WORKER_IDLE_CHECKED_IN:
                self._apply(guest_resume(self.registry, cvm.id, v.index))
            self._start(v, task)
        elif v.is_worker and v.lifecycle is L.WORKER_ACTIVE:
            self._refresh(v)
            self.send(ProtocolMessage(MessageKind.CHECKIN, cvm.id, v.index))
        else:
            self._refresh(v)

    def _start(self, v: Vcpu, task: Task) -> None:
        advance_execution(v, self.now)
        v.current = task
        v.remaining = self.remaining.get(task.id, task.duration)
        self.started.setdefault(task.id, self.now)
        self.cvms[v.cvm].tasks_run += 1
        self._schedule_slice(v)
        self._refresh(v)

    def _schedule_slice(self, v: Vcpu) -> None:
        run = v.remaining
        if self.flags.preemptive_regular and not v.is_worker:
            run = min(run, self.flags.regular_quantum)
        v.done_event = self.engine.after(run, EventKind.TASK_DONE, target=(v.cvm, v.index))

    def _on_task_done(self, ev) -> None:
        cvm = self.cvms[ev.target[0]]
        v = cvm.vcpus[ev.target[1]]
        advance_execution(v, self.now)
        task = v.current
        v.done_event = None
        if v.remaining > 0:
            # quantum expired on a preemptive regular vCPU
            if v.queue or cvm.shared_queue:
                self.remaining[task.id] = v.remaining
                v.current = None
                v.queue.append(task)
                self._refresh(v)
                self.try_start(v)
            else:
                self._schedule_slice(v)
            return
        v.current = None
        self._refresh(v)
        self.remaining.pop(task.id, None)
        self.finished[task.id] = self.now
        self.outstanding -= 1
        if self.strategy.container_fleet:
            self._refresh(v)
            if cvm.single_use:
                self.shutdown_cvm(cvm)
            self._container_dispatch()
        else:
            self.try_start(v)
        self._check_end()

    # ------------------------------------------------------------ hypervisor

    def begin_wake(self, v: Vcpu) -> None:
        hypervisor_transition(self.registry, v.cvm, v.index, Action.WAKE)  # validate now
        v.transition = "wake"
        self._transition_start[v.vid] = self.now
        self._refresh(v)
        self.engine.after(self.wake_lat, EventKind.TRANSITION_DONE, target=(v.cvm, v.index), data="wake")

    def begin_sleep(self, v: Vcpu) -> None:
        hypervisor_transition(self.registry, v.cvm, v.index, Action.SLEEP)
        if v.lifecycle is not L.WORKER_IDLE_CHECKED_IN or v.current is not None:
            raise SimulationError(f"{v.vid}: sleep started on a worker that has not checked in")
        v.transition = "sleep"
        self._transition_start[v.vid] = self.now
        self._refresh(v)
        if self.strategy is Strategy.HOTPLUG:
            self._migrate_queue(v)
        self.engine.after(self.sleep_lat, EventKind.TRANSITION_DONE, target=(v.cvm, v.index), data="sleep")

    def _migrate_queue(self, v: Vcpu) -> None:
        cvm = self.cvms[v.cvm]
        moved = cvm.drain_queue(v)
        for task in moved:
            targets = [u for u in cvm.vcpus if u is not v and u.transition is None
                       and u.lifecycle is not L.WORKER_DORMANT]
            dest = min(targets, key=lambda u: (u.load, u.index))
            dest.queue.append(task)
            self.try_start(dest)

    def _on_transition_done(self, ev) -> None:
        cvm = self.cvms[ev.target[0]]
        if cvm.shut_down:
            return
        v = cvm.vcpus[ev.target[1]]
        kind = ev.data
        v.transition = None
        started = self._transition_start.pop(v.vid)
        if kind == "wake":
            self.wake_latencies.append(self.now - started)
            self._apply(hypervisor_transition(self.registry, cvm.id, v.index, Action.WAKE))
            advance_execution(v, self.now)
            self.try_start(v)
        else:
            self.sleep_latencies.append(self.now - started)
            self._apply(hypervisor_transition(self.registry, cvm.id, v.index, Action.SLEEP))
            if cvm.id not in self.sampling and all(
                    w.lifecycle is L.WORKER_DORMANT and w.transition is None for w in cvm.workers):
                self.start_sampling(cvm)
            self._check_end()

    def start_sampling(self, cvm: Cvm) -> None:
        self.sampling.add(cvm.id)
        self.ticks.setdefault(cvm.id, 0)
        for v in cvm.vcpus:
            advance_execution(v, self.now)
            v.busy_accumulator = 0
        self.tick_events[cvm.id] = self.engine.after(self.sampler_cfg.interval, EventKind.SAMPLING_TICK,
                                                     target=cvm.id)

    def _on_tick(self, ev) -> None:
        cvm = self.cvms[ev.target]
        if cvm.shut_down:
            return
        for v in cvm.vcpus:
            advance_execution(v, self.now)
        s = sample(cvm.id, cvm.vcpus, self.sampler_cfg.interval, self.now, self.background,
                   background_on_workers=self.strategy is Strategy.BACKUP_VCPU)
        self.ticks[cvm.id] += 1
        decisions = self.schedulers[cvm.id].tick(s, [WorkerView.of(w) for w in cvm.workers])
        for d in decisions:
            self.execute_decision(cvm, d)
        if self._finished_run:
            return
        self.tick_events[cvm.id] = self.engine.after(self.sampler_cfg.interval, EventKind.SAMPLING_TICK,
                                                     target=cvm.id)
        if self.outstanding == 0 and self.arrivals_pending == 0:
            self._epilogue_ticks += 1
        self._check_stall()
        self._check_end()

    def execute_decision(self, cvm: Cvm, d) -> None:
        if isinstance(d, WakeWorker):
            self.begin_wake(cvm.vcpus[d.vcpu])
        elif isinstance(d, RequestSleep):
            v = cvm.vcpus[d.vcpu]
            if v.lifecycle is L.WORKER_IDLE_CHECKED_IN:
                self.begin_sleep(v)
            else:
                self._apply(hypervisor_transition(self.registry, cvm.id, v.index, Action.SLEEP))
        elif isinstance(d, ScaleOut):
            self.launch(cvm.owner)

    # ----------------------------------------------------------------- fleet

    def launch(self, user: str, function: Optional[str] = None) -> Optional[Cvm]:
        """Start one more CVM if the fleet has room; None means rejected."""
        if len(self.live_cvms()) >= self.fleet_cfg.max_cvms:
            self.rejected_launches += 1
            return None
        tmpl = dataclasses.replace(self.fleet_cfg.cvm_template, owner=user)
        if self.strategy.container_fleet:
            tmpl = dataclasses.replace(tmpl, boot_latency=self.fleet_cfg.cold_boot_latency)
            return self.launch_cvm(tmpl, persistent=False,
                                   single_use=self.strategy is Strategy.FIXED_COLD_START,
                                   function=function)
        return self.launch_cvm(tmpl, persistent=True)

    def _on_arrival(self, ev) -> None:
        task: Task = ev.data
        self.arrivals_pending -= 1
        if self.strategy.container_fleet:
            self.fleet_queue.append(task)
            self._container_dispatch()
            return
        ready = [c for c in self.live_cvms() if c.booted and c.owner == task.user]
        if ready:
            self._place(min(ready, key=lambda c: c.load), task)
            return
        self.fleet_queue.append(task)
        if not any(c.owner == task.user for c in self.live_cvms()):
            self.launch(task.user)

    def _place(self, cvm: Cvm, task: Task) -> None:
        rec = cvm.bind_task(task)
        if rec.vcpu is not None:
            self.try_start(cvm.vcpus[rec.vcpu])

    def _container_eligible(self, cvm: Cvm, task: Task) -> bool:
        if cvm.shut_down or not cvm.booted or not cvm.idle or cvm.owner != task.user:
            return False
        if cvm.single_use:
            return cvm.tasks_run == 0 and cvm.function == task.function
        if self.strategy is Strategy.FIXED_WARM_KEEP:
            return cvm.function in (None, task.function)
        return True

    def _container_dispatch(self) -> None:
        waiting = deque()
        while self.fleet_queue:
            task = self.fleet_queue.popleft()
            cvm = next((c for c in self.cvms.values() if self._container_eligible(c, task)), None)
            if cvm is None:
                waiting.append(task)
                continue
            if cvm.function is None and self.strategy is Strategy.FIXED_WARM_KEEP:
                cvm.function = task.function
            self._place(cvm, task)
        self.fleet_queue = waiting
        booting = sum(1 for c in self.live_cvms() if not c.booted)
        for task in list(self.fleet_queue)[booting:]:
            if self.launch(task.user, task.function) is None:
                break

    def _on_boot_done(self, ev) -> None:
        cvm = self.cvms[ev.target]
        cvm.booted = True
        if self.ready_at is None:
            self.ready_at = self.now
        for v in cvm.vcpus:
            v.last_account = self.now
            self._refresh(v)
        for msg in cvm.boot_messages():
            self.send(msg)
        for w in cvm.workers:
            self.try_start(w)
        if self.strategy.elastic and not cvm.workers:
            self.start_sampling(cvm)
        if self.strategy.container_fleet:
            self._container_dispatch()
        else:
            keep = deque()
            for task in self.fleet_queue:
                if task.user == cvm.owner:
                    self._place(cvm, task)
                else:
                    keep.append(task)
            self.fleet_queue = keep
        self._check_end()

    def _on_shutdown_request(self, ev) -> None:
        cvm = self.cvms[ev.target]
        if not cvm.shut_down and cvm.booted:
            self.shutdown_cvm(cvm)

    def shutdown_cvm(self, cvm: Cvm) -> None:
        for msg in cvm.shutdown_messages():
            self.send(msg)
        for v in cvm.vcpus:
            self._close(v)
        cvm.shut_down = True
        tick = self.tick_events.pop(cvm.id, None)
        if tick is not None:
            self.engine.cancel(tick)

    # ------------------------------------------------------------ run end

    def _quiescent(self, cvm: Cvm) -> bool:
        if not cvm.booted:
            return False
        if any(w.transition is not None or w.in_flight for w in cvm.workers):
            return False
        if self.strategy.elastic:
            return all(w.lifecycle is L.WORKER_DORMANT for w in cvm.workers)
        return True

    def _check_end(self) -> None:
        if self._finished_run or self.outstanding or self.arrivals_pending:
            return
        if self.scenario.horizon is not None:
            return
        live = self.live_cvms()
        capped = self._epilogue_ticks >= EPILOGUE_TICK_CAP
        if all(self._quiescent(c) for c in live) or (
                capped and all(c.booted and not any(w.transition for w in c.workers) for c in live)):
            for c in live:
                self.shutdown_cvm(c)
            self._finished_run = True
            self.engine.stop()

    def _check_stall(self) -> None:
        if self.scenario.horizon is not None or not self.outstanding or self.arrivals_pending:
            self._stall_ticks = 0
            return
        busy = any(v.current is not None or v.transition is not None or v.in_flight
                   for c in self.live_cvms() for v in c.vcpus)
        booting = any(not c.booted for c in self.live_cvms())
        if busy or booting:
            self._stall_ticks = 0
            return
        self._stall_ticks += 1
        if self._stall_ticks >= STALL_TICKS:
            log.warning("run stalled with %d tasks parked on dormant workers", self.outstanding)
            self.complete = False
            self._finished_run = True
            self.engine.stop()

    def _finalize(self, events: int) -> RunReport:
        for cvm in self.cvms.values():
            if cvm.shut_down:
                continue
            if self.outstanding == 0 and cvm.booted and self._quiescent_for_shutdown(cvm):
                self.shutdown_cvm(cvm)
            else:
                for v in cvm.vcpus:
                    self._close(v)
        records = [TaskRecord(t.id, t.user, t.function, t.arrival, t.duration,
                              self.started.get(t.id), self.finished.get(t.id)) for t in self.tasks]
        total_ticks = sum(self.ticks.values())
        return RunReport(
            scenario=self.scenario.name,
            strategy=self.strategy.value,
            seed=self.scenario.seed,
            timeline=self.timeline,
            tasks=records,
            messages=self.messages,
            transitions=self.transitions,
            wake_latencies=self.wake_latencies,
            sleep_latencies=self.sleep_latencies,
            boot_latencies=self.boot_latencies,
            sampler_ticks=dict(self.ticks),
            sampler_cost_us=total_ticks * self.sampler_cfg.per_vm_cost,
            ready_at=self.ready_at,
            end_time=self.now,
            events_processed=events,
            complete=self.complete and self.outstanding == 0,
        )

    def _quiescent_for_shutdown(self, cvm: Cvm) -> bool:
        return not any(v.current or v.transition or v.in_flight or v.queue for v in cvm.vcpus)


def run_scenario(scenario: Scenario, **kw) -> RunReport:
    return Simulation(scenario, **kw).run()
