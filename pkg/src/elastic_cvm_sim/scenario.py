"""Scenario files: parsing, validation, defaults and lossless serialization.

Durations may be written as integer microseconds or as decimal strings with
a ``us``, ``ms`` or ``s`` suffix (``"10.36s"``). They are stored as integer
microseconds, so a parsed-then-dumped scenario reparses to itself.
"""
from __future__ import annotations

import copy
import json
import re
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Any, Literal, Optional

import pydantic
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, model_validator

from .guest import CvmConfig
from .hypervisor import (FleetConfig, SamplerConfig, SchedulerPolicy, Strategy,
                         TransitionLatencies)
from .workload import WorkloadSpec

_UNITS = {"us": 1, "ms": 1_000, "s": 1_000_000}
_DURATION_RE = re.compile(r"^\s*([0-9]+(?:\.[0-9]*)?|\.[0-9]+)\s*(us|ms|s)\s*$")


class ParseError(ValueError):
    pass


class ScenarioValidationError(ValueError):
    pass


def parse_duration(value: Any) -> int:
    """Convert an integer or suffixed decimal literal to whole microseconds."""
    if isinstance(value, bool):
        raise ValueError("duration cannot be a boolean")
    if isinstance(value, int):
        if value < 0:
            raise ValueError("duration must be >= 0")
        return value
    if isinstance(value, str):
        s = value.strip()
        if s.isdigit():
            return int(s)
        m = _DURATION_RE.match(s)
        if not m:
            raise ValueError(f"bad duration literal {value!r} (use integer us or e.g. 1.5s, 20ms, 14us)")
        try:
            us = Decimal(m.group(1)) * _UNITS[m.group(2)]
        except InvalidOperation as exc:
            raise ValueError(f"bad duration literal {value!r}") from exc
        if us != us.to_integral_value():
            raise ValueError(f"duration {value!r} is not a whole number of microseconds")
        return int(us)
    raise ValueError(f"duration must be an integer or string, got {type(value).__name__}")


Duration = Annotated[int, BeforeValidator(parse_duration)]
StrategyName = Literal["WorkerVcpu", "Hotplug", "BackupVcpu", "FixedColdStart", "FixedWarmKeep"]


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_default=True)


class CvmModel(_Strict):
    regular_vcpus: int = 1
    worker_vcpus: int = 0
    boot_latency: Duration = 0
    owner: str = "u0"

    def build(self) -> CvmConfig:
        return CvmConfig(self.regular_vcpus, self.worker_vcpus, self.boot_latency, self.owner)


class FleetModel(_Strict):
    strategy: StrategyName = "WorkerVcpu"
    max_cvms: int = 1
    cvm_template: CvmModel = Field(default_factory=CvmModel)
    cold_boot_latency: Duration = 15_000_000
    warm_pool_size: int = 0

    def build(self) -> FleetConfig:
        return FleetConfig(Strategy(self.strategy), self.max_cvms, self.cvm_template.build(),
                           self.cold_boot_latency, self.warm_pool_size)


class SchedulerModel(_Strict):
    interval: Duration = 2_000_000
    per_vm_cost: Duration = 20
    wake_threshold: float = 0.9
    sleep_threshold: float = 0.5
    max_wakes_per_tick: int = 1
    max_sleeps_per_tick: int = 1
    scaleout_ticks: int = 1

    def policy(self) -> SchedulerPolicy:
        # str() first so 0.9 becomes exactly 9/10
        return SchedulerPolicy(Fraction(str(self.wake_threshold)), Fraction(str(self.sleep_threshold)),
                               self.max_wakes_per_tick, self.max_sleeps_per_tick, self.scaleout_ticks)

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(self.interval, self.per_vm_cost)


class LatenciesModel(_Strict):
    wake: Duration = 7
    sleep: Duration = 7
    hotplug_add: Duration = 24_790
    hotplug_remove: Duration = 10_624
    message: Duration = 0

    def build(self) -> TransitionLatencies:
        return TransitionLatencies(self.wake, self.sleep, self.hotplug_add, self.hotplug_remove, self.message)


class WorkloadModel(_Strict):
    kind: Literal["batch", "burst", "poisson"] = "batch"
    count: int = 0
    duration: Duration = 10_000_000
    start: Duration = 0
    user: str = "u0"
    function: str = "f0"
    distinct_functions: bool = False
    rate: float = 1.0
    horizon: Optional[Duration] = None

    def build(self) -> WorkloadSpec:
        return WorkloadSpec(self.kind, self.count, self.duration, self.start, self.user,
                            self.function, self.distinct_functions, self.rate, self.horizon)


class FlagsModel(_Strict):
    preemptive_regular: bool = False
    dispatch_on_checkin: bool = False
    duration_jitter: float = 0.0
    background_utilization: float = 0.0
    regular_quantum: Duration = 10_000

    @model_validator(mode="after")
    def _check(self):
        if not 0 <= self.duration_jitter < 1:
            raise ValueError("duration_jitter must lie in [0, 1)")
        if not 0 <= self.background_utilization <= 1:
            raise ValueError("background_utilization must lie in [0, 1]")
        if self.regular_quantum <= 0:
            raise ValueError("regular_quantum must be > 0")
        return self


class Scenario(_Strict):
    name: str = "scenario"
    seed: int = Field(default=0, ge=0, lt=2**64)
    horizon: Optional[Duration] = None
    cvms: list[CvmModel] = Field(default_factory=list)
    fleet: FleetModel = Field(default_factory=FleetModel)
    scheduler: SchedulerModel = Field(default_factory=SchedulerModel)
    latencies: LatenciesModel = Field(default_factory=LatenciesModel)
    workload: WorkloadModel = Field(default_factory=WorkloadModel)
    flags: FlagsModel = Field(default_factory=FlagsModel)
    # partial scenario documents merged in when a strategy is selected
    strategy_overrides: dict[StrategyName, dict[str, Any]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _invariants(self):
        for c in self.cvms:
            c.build()
        self.fleet.build()
        self.scheduler.policy()
        self.scheduler.sampler()
        self.latencies.build()
        self.workload.build()
        if self.horizon is not None and self.horizon <= 0:
            raise ValueError("horizon must be > 0")
        return self

    @property
    def strategy(self) -> Strategy:
        return Strategy(self.fleet.strategy)

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def with_strategy(self, strategy: str | Strategy) -> "Scenario":
        """Same experiment under another strategy, applying its overrides."""
        name = strategy.value if isinstance(strategy, Strategy) else Strategy(strategy).value
        data = self.to_dict()
        data["fleet"]["strategy"] = name
        override = self.strategy_overrides.get(name)
        if override:
            data = deep_merge(data, override)
        return scenario_from_dict(data)

    def with_param(self, dotted: str, value: Any) -> "Scenario":
        data = self.to_dict()
        set_path(data, dotted, value)
        return scenario_from_dict(data)


def deep_merge(base: dict, patch: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in patch.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_path(data: dict, dotted: str, value: Any) -> None:
    parts = dotted.split(".")
    node = data
    for i, p in enumerate(parts[:-1]):
        if isinstance(node, list):
            p = int(p)
        try:
            node = node[p]
        except (KeyError, IndexError, ValueError) as exc:
            raise ScenarioValidationError(f"unknown parameter path {'.'.join(parts[:i + 1])}") from exc
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    elif isinstance(node, dict) and last in node:
        node[last] = value
    else:
        raise ScenarioValidationError(f"unknown parameter path {dotted}")


def _format_error(err: pydantic.ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"]) or "<root>"
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def scenario_from_dict(data: dict) -> Scenario:
    try:
        sc = Scenario.model_validate(data)
        for name in sc.strategy_overrides:
            d = deep_merge(sc.to_dict(), sc.strategy_overrides[name])
            d["fleet"]["strategy"] = name
            d["strategy_overrides"] = {}
            Scenario.model_validate(d)
        return sc
    except pydantic.ValidationError as exc:
        raise ScenarioValidationError(_format_error(exc)) from None


def parse_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ParseError(f"{path}: top level must be a JSON object")
    try:
        return scenario_from_dict(data)
    except ScenarioValidationError as exc:
        raise ScenarioValidationError(f"{path}: {exc}") from None
