"""Timelines, run metrics and file exports."""
from __future__ import annotations

import csv
import enum
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .sim_core import SimTime


class OverlapError(ValueError):
    pass


class Incomplete(ValueError):
    pass


class DivisionUndefined(ZeroDivisionError):
    pass


class SegState(enum.Enum):
    DORMANT = "Dormant"
    ACTIVE_BUSY = "ActiveBusy"
    ACTIVE_IDLE = "ActiveIdle"
    BOOTING = "Booting"
    TRANSITION_WAKE = "TransitionWake"
    TRANSITION_SLEEP = "TransitionSleep"


GLYPHS = {
    SegState.DORMANT: ".",
    SegState.ACTIVE_BUSY: "#",
    SegState.ACTIVE_IDLE: "o",
    SegState.BOOTING: "B",
    SegState.TRANSITION_WAKE: "~",
    SegState.TRANSITION_SLEEP: "~",
}

PROVISIONED = frozenset(SegState) - {SegState.DORMANT}


@dataclass(frozen=True)
class TimelineSegment:
    vcpu: str
    state: SegState
    start: SimTime
    end: SimTime
    task: Optional[int] = None
    kind: str = "regular"

    @property
    def length(self) -> SimTime:
        return self.end - self.start


class Timeline:
    """Per-vCPU contiguous state segments, validated on insert."""

    def __init__(self):
        self.segments: dict[str, list[TimelineSegment]] = {}
        self.births: dict[str, SimTime] = {}
        self.kinds: dict[str, str] = {}

    def birth(self, vcpu: str, at: SimTime, kind: str) -> None:
        if vcpu in self.births:
            raise OverlapError(f"{vcpu} born twice")
        self.births[vcpu] = at
        self.kinds[vcpu] = kind
        self.segments[vcpu] = []

    def record(self, seg: TimelineSegment) -> None:
        if seg.start >= seg.end:
            raise OverlapError(f"{seg.vcpu}: empty or reversed segment [{seg.start}, {seg.end})")
        if (seg.state is SegState.ACTIVE_BUSY) != (seg.task is not None):
            raise ValueError(f"{seg.vcpu}: only ActiveBusy segments carry a task")
        if seg.vcpu not in self.births:
            self.birth(seg.vcpu, seg.start, seg.kind)
        segs = self.segments[seg.vcpu]
        expected = segs[-1].end if segs else self.births[seg.vcpu]
        if seg.start != expected:
            raise OverlapError(f"{seg.vcpu}: segment starts at {seg.start}, expected {expected}")
        segs.append(seg)

    def all_segments(self) -> list[TimelineSegment]:
        return [s for v in self.segments for s in self.segments[v]]

    def busy_by_task(self) -> dict[int, SimTime]:
        out: dict[int, SimTime] = {}
        for s in self.all_segments():
            if s.state is SegState.ACTIVE_BUSY:
                out[s.task] = out.get(s.task, 0) + s.length
        return out

    def total(self, states: Iterable[SegState], window: tuple[SimTime, SimTime] | None = None) -> SimTime:
        states = frozenset(states)
        acc = 0
        for s in self.all_segments():
            if s.state not in states:
                continue
            if window is None:
                acc += s.length
            else:
                lo, hi = max(s.start, window[0]), min(s.end, window[1])
                if hi > lo:
                    acc += hi - lo
        return acc


@dataclass(frozen=True)
class TaskRecord:
    id: int
    user: str
    function: str
    arrival: SimTime
    duration: SimTime
    start: Optional[SimTime] = None
    finish: Optional[SimTime] = None


@dataclass
class RunReport:
    scenario: str
    strategy: str
    seed: int
    timeline: Timeline
    tasks: list[TaskRecord]
    messages: list[tuple]  # (time_us, cvm_id, vcpu_index or None, message)
    transitions: list[tuple]  # (time_us, cvm_id, vcpu, before, input, after)
    wake_latencies: list[SimTime] = field(default_factory=list)
    sleep_latencies: list[SimTime] = field(default_factory=list)
    boot_latencies: list[SimTime] = field(default_factory=list)
    sampler_ticks: dict[str, int] = field(default_factory=dict)
    sampler_cost_us: SimTime = 0
    ready_at: Optional[SimTime] = None
    end_time: SimTime = 0
    events_processed: int = 0
    complete: bool = True

    @property
    def completed(self) -> list[TaskRecord]:
        return [t for t in self.tasks if t.finish is not None]

    def window(self) -> tuple[SimTime, SimTime]:
        if not self.tasks:
            return (0, self.end_time)
        lo = min(t.arrival for t in self.tasks)
        done = self.completed
        hi = max(t.finish for t in done) if done else self.end_time
        return (lo, hi)


def makespan(tasks: list[TaskRecord]) -> SimTime:
    """Last finish minus first arrival."""
    if not tasks:
        return 0
    missing = [t.id for t in tasks if t.finish is None]
    if missing:
        raise Incomplete(f"tasks never finished: {missing[:10]}")
    return max(t.finish for t in tasks) - min(t.arrival for t in tasks)


def cpu_efficiency(timeline: Timeline, window: tuple[SimTime, SimTime]) -> float:
    """Busy time over provisioned (non-dormant) vCPU time inside ``window``."""
    busy = timeline.total([SegState.ACTIVE_BUSY], window)
    provisioned = timeline.total(PROVISIONED, window)
    if provisioned == 0:
        raise DivisionUndefined("no provisioned vCPU time in window")
    return busy / provisioned


def active_vcpu_time(timeline: Timeline, window: tuple[SimTime, SimTime]) -> SimTime:
    return timeline.total(PROVISIONED, window)


def epilogue_latency(timeline: Timeline) -> dict[str, SimTime]:
    """For each worker, gap between its last busy segment and its final dormancy."""
    out = {}
    for vcpu, segs in timeline.segments.items():
        if timeline.kinds[vcpu] != "worker":
            continue
        last_busy = max((s.end for s in segs if s.state is SegState.ACTIVE_BUSY), default=None)
        if last_busy is None:
            out[vcpu] = 0
            continue
        dormant_after = [s.start for s in segs
                         if s.state is SegState.DORMANT and s.start >= last_busy]
        out[vcpu] = (dormant_after[0] - last_busy) if dormant_after else (segs[-1].end - last_busy)
    return out


def _mean(xs: list[int]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def transition_stats(report: RunReport) -> dict:
    wake, sleep = report.wake_latencies, report.sleep_latencies
    return {
        "wake_count": len(wake),
        "sleep_count": len(sleep),
        "wake_mean_us": _mean(wake),
        "sleep_mean_us": _mean(sleep),
        "round_trip_mean_us": _mean(wake) + _mean(sleep),
    }


def summary(report: RunReport) -> dict:
    done = report.completed
    try:
        eff = cpu_efficiency(report.timeline, report.window())
    except DivisionUndefined:
        eff = None
    ms = makespan(done) if done else 0
    return {
        "scenario": report.scenario,
        "strategy": report.strategy,
        "seed": report.seed,
        "tasks": len(report.tasks),
        "tasks_completed": len(done),
        "complete": report.complete,
        "makespan_us": ms,
        "makespan_after_ready_us": (max(t.finish for t in done) - report.ready_at)
        if done and report.ready_at is not None else 0,
        "cpu_efficiency": eff,
        "busy_us": report.timeline.total([SegState.ACTIVE_BUSY]),
        "epilogue_us": epilogue_latency(report.timeline),
        "transitions": transition_stats(report),
        "total_transitions": len(report.wake_latencies) + len(report.sleep_latencies),
        "total_boot_us": sum(report.boot_latencies),
        "sampler_ticks": report.sampler_ticks,
        "sampler_cost_us": report.sampler_cost_us,
        "end_us": report.end_time,
        "events_processed": report.events_processed,
    }


TIMELINE_HEADER = ["vcpu_id", "kind", "state", "from_us", "to_us", "task_id"]
TASKS_HEADER = ["task_id", "user", "function", "arrival_us", "start_us", "finish_us"]
MESSAGES_HEADER = ["time_us", "cvm_id", "vcpu_id", "message"]
SCHEMA_TAG = "# elastic-cvm-sim {name} v1\n"


def _csv_text(name: str, header: list[str], rows: Iterable[list]) -> str:
    buf = io.StringIO()
    buf.write(SCHEMA_TAG.format(name=name))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if x is None else x for x in r])
    return buf.getvalue()


def timeline_csv(report: RunReport) -> str:
    rows = []
    for vcpu in report.timeline.segments:
        for s in report.timeline.segments[vcpu]:
            rows.append([vcpu, report.timeline.kinds[vcpu], s.state.value, s.start, s.end, s.task])
    return _csv_text("timeline", TIMELINE_HEADER, rows)


def tasks_csv(report: RunReport) -> str:
    rows = [[t.id, t.user, t.function, t.arrival, t.start, t.finish] for t in report.tasks]
    return _csv_text("tasks", TASKS_HEADER, rows)


def messages_csv(report: RunReport) -> str:
    rows = [[t, cvm, vcpu, msg] for t, cvm, vcpu, msg in report.messages]
    return _csv_text("messages", MESSAGES_HEADER, rows)


def text_timeline(report: RunReport, bucket: SimTime = 500_000,
                  start: SimTime | None = None, end: SimTime | None = None) -> str:
    """Fixed-width grid, one glyph per bucket. Each cell shows the state
    covering most of that bucket; blank where the vCPU did not exist."""
    tl = report.timeline
    if start is None:
        start = min(tl.births.values(), default=0)
    if end is None:
        end = report.end_time
    nb = max(1, -(-(end - start) // bucket))
    width = max((len(v) for v in tl.segments), default=4)
    lines = [f"{'':<{width}} |t0={start}us bucket={bucket}us"]
    for vcpu, segs in tl.segments.items():
        cells = []
        for b in range(nb):
            lo, hi = start + b * bucket, start + (b + 1) * bucket
            best, best_len = None, 0
            for s in segs:
                ov = min(s.end, hi) - max(s.start, lo)
                if ov > best_len:
                    best, best_len = s.state, ov
            cells.append(GLYPHS[best] if best is not None else " ")
        lines.append(f"{vcpu:<{width}} |{''.join(cells)}")
    return "\n".join(lines) + "\n"


def report_json(report: RunReport) -> str:
    return json.dumps(summary(report), indent=2, sort_keys=True) + "\n"


def export(report: RunReport, fmt: str, path: str | Path) -> Path:
    """Write one export; ``fmt`` is csv|jsonl|text-timeline|json."""
    path = Path(path)
    try:
        if fmt == "csv":
            path.mkdir(parents=True, exist_ok=True)
            (path / "timeline.csv").write_text(timeline_csv(report))
            (path / "tasks.csv").write_text(tasks_csv(report))
            (path / "messages.csv").write_text(messages_csv(report))
        elif fmt == "jsonl":
            lines = [json.dumps({"vcpu_id": s.vcpu, "kind": report.timeline.kinds[s.vcpu],
                                 "state": s.state.value, "from_us": s.start, "to_us": s.end,
                                 "task_id": s.task}, sort_keys=True)
                     for v in report.timeline.segments for s in report.timeline.segments[v]]
            path.write_text("\n".join(lines) + ("\n" if lines else ""))
        elif fmt == "text-timeline":
            path.write_text(text_timeline(report))
        elif fmt == "json":
            path.write_text(report_json(report))
        else:
            raise ValueError(f"unknown export format {fmt!r}")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return path


def write_all(report: RunReport, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    export(report, "csv", out)
    export(report, "text-timeline", out / "timeline.txt")
    export(report, "json", out / "report.json")
    return out
