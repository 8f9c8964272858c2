"""Shared builders and independent checkers for the test suite."""
from __future__ import annotations

import random
from importlib import resources

from elastic_cvm_sim.scenario import Scenario, parse_scenario, scenario_from_dict

MS = 1_000
S = 1_000_000


def fixture(name: str) -> Scenario:
    path = resources.files("elastic_cvm_sim") / "fixtures" / name
    return parse_scenario(str(path))


def scenario(**parts) -> Scenario:
    return scenario_from_dict(parts)


def random_scenario(seed: int) -> Scenario:
    """A small randomized scenario: thresholds, shape, latencies and load all vary."""
    r = random.Random(seed)
    high = r.choice([0.3, 0.5, 0.7, 0.9, 1.0])
    low = r.choice([x for x in (0.0, 0.1, 0.25, 0.5, 0.6) if x < high])
    strategy = r.choice(["WorkerVcpu", "WorkerVcpu", "Hotplug", "BackupVcpu"])
    kind = r.choice(["batch", "burst", "poisson"])
    workload = {
        "kind": kind,
        "count": r.randint(1, 8),
        "duration": r.randint(1, 3 * S),
        "start": r.randint(0, 2 * S),
        "rate": round(r.uniform(0.5, 4.0), 3),
    }
    horizon = None
    if kind == "poisson":
        workload["horizon"] = r.randint(1, 4) * S
    if r.random() < 0.2:
        horizon = r.randint(5, 40) * S
    return scenario(
        name=f"random-{seed}",
        seed=seed,
        horizon=horizon,
        cvms=[{"regular_vcpus": r.randint(1, 2), "worker_vcpus": r.randint(0, 4),
               "boot_latency": r.randint(0, 500 * MS)}],
        fleet={"strategy": strategy, "max_cvms": r.randint(1, 2),
               "cvm_template": {"regular_vcpus": 1, "worker_vcpus": r.randint(0, 2)}},
        scheduler={"interval": r.choice([50 * MS, 100 * MS, 250 * MS, 500 * MS]),
                   "wake_threshold": high, "sleep_threshold": low,
                   "max_wakes_per_tick": r.randint(1, 3), "scaleout_ticks": r.randint(1, 3)},
        latencies={"wake": r.randint(0, 5 * MS), "sleep": r.randint(0, 5 * MS),
                   "message": r.choice([0, 0, r.randint(1, 2 * MS)])},
        workload=workload,
        flags={"preemptive_regular": r.random() < 0.3,
               "dispatch_on_checkin": r.random() < 0.3,
               "duration_jitter": r.choice([0.0, 0.0, 0.2])},
    )


def never_kill_violations(report) -> list[str]:
    """Worker stops not preceded by a CHECKIN since the worker last became active.

    Rebuilt from the logs alone. The transition log is in causal order, and
    every CHECKIN input there must also appear on the wire in the message log.
    """
    bad = []
    checked_in: dict = {}
    seen_checkins: dict = {}
    for t, cvm, idx, before, inp, after in report.transitions:
        key = (cvm, idx)
        if inp == "CHECKIN":
            checked_in[key] = True
            seen_checkins[key] = seen_checkins.get(key, 0) + 1
        elif after == "WorkerActive" and before != "WorkerActive":
            checked_in[key] = False
        if after == "WorkerDormant" and before != "WorkerDormant":
            if before != "WorkerIdleCheckedIn" or not checked_in.get(key, False):
                bad.append(f"{cvm}.v{idx} stopped at {t} from {before} without CHECKIN")
    sent: dict = {}
    for _, cvm, vcpu, msg in report.messages:
        if msg == "CHECKIN":
            sent[(cvm, vcpu)] = sent.get((cvm, vcpu), 0) + 1
    for key, n in seen_checkins.items():
        if sent.get(key, 0) < n:
            bad.append(f"{key} has {n} CHECKIN transitions but {sent.get(key, 0)} messages")
    return bad
