"""Acceptance criteria, one test per criterion (criterion 10 has four parts).

Each test records a verdict; the suite prints one PASS/FAIL line per
criterion at the end of the run. Run alone with

    pytest tests/test_acceptance.py -v
"""
import itertools
import random
import time
from fractions import Fraction

import pytest

from elastic_cvm_sim.hypervisor import SamplerConfig, Strategy
from elastic_cvm_sim.metrics import (SegState, cpu_efficiency, messages_csv, summary, tasks_csv,
                                     timeline_csv, transition_stats)
from elastic_cvm_sim.protocol import (Action, LifecycleState, MessageKind, ProtocolViolation,
                                      VcpuKind, next_state, transition_table)
from elastic_cvm_sim.simulation import run_scenario
from tests.helpers import MS, S, fixture, never_kill_violations, random_scenario, scenario

_verdicts: dict[int, list[tuple[str, bool, str]]] = {}

TITLES = {
    1: "protocol exhaustiveness",
    2: "never-kill safety over 1000 random scenarios",
    3: "determinism of CSV exports",
    4: "work conservation",
    5: "regular VM baseline makespan 20 s",
    6: "sampling-interval sweep",
    7: "epilogue one-by-one within four cycles",
    8: "transition latency ratio",
    9: "sampler overhead accounting",
    10: "serverless comparison",
    11: "strategy equivalence with n=0",
    12: "boot-time neutrality in n",
}


def verdict(n: int, part: str, ok: bool, detail: str) -> None:
    _verdicts.setdefault(n, []).append((part, bool(ok), detail))
    assert ok, f"criterion {n} [{part}]: {detail}"


def criterion_lines() -> list[str]:
    out = []
    for n in sorted(_verdicts):
        parts = _verdicts[n]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{'' if p[1] else 'FAILED '}{p[0]}: {p[2]}" for p in parts)
        out.append(f"{'PASS' if ok else 'FAIL'} {n:>2} {TITLES[n]} ({detail})")
    return out


def _all_pairs():
    inputs = list(MessageKind) + list(Action)
    return list(itertools.product(VcpuKind, LifecycleState, inputs))


def test_c01_protocol_exhaustiveness():
    t0 = time.perf_counter()
    table = {(s, i): n for s, i, n in transition_table()}
    mismatches = []
    legal_seen = set()
    for kind, state, inp in _all_pairs():
        try:
            got = next_state(kind, state, inp)
        except ProtocolViolation:
            got = None
        want = table.get((state, inp))
        if got is not None:
            legal_seen.add((state, inp, got))
            if got != want:
                mismatches.append((kind, state, inp, got, want))
        elif want is not None and _reachable(kind, state) and _reachable(kind, want):
            mismatches.append((kind, state, inp, None, want))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and legal_seen == set(transition_table()) and elapsed < 1.0
    verdict(1, "table", ok, f"{len(_all_pairs())} pairs, {len(legal_seen)} legal, "
                            f"{len(mismatches)} mismatches, {elapsed * 1000:.1f} ms")


def _reachable(kind, state):
    if kind is VcpuKind.REGULAR:
        return state in (LifecycleState.UNREGISTERED, LifecycleState.REGISTERED_MAIN,
                         LifecycleState.DEREGISTERED)
    return state is not LifecycleState.REGISTERED_MAIN


def test_c02_never_kill():
    t0 = time.perf_counter()
    bad = {}
    for seed in range(1000):
        v = never_kill_violations(run_scenario(random_scenario(seed)))
        if v:
            bad[seed] = v
    elapsed = time.perf_counter() - t0
    verdict(2, "random runs", not bad and elapsed < 30,
            f"{len(bad)} violating runs, {elapsed:.1f} s")


def test_c03_determinism():
    diffs = []
    for name in ("synthetic.json", "burst_serverless.json"):
        a, b = run_scenario(fixture(name)), run_scenario(fixture(name))
        for fn in (timeline_csv, tasks_csv, messages_csv):
            if fn(a).encode() != fn(b).encode():
                diffs.append(f"{name}:{fn.__name__}")
    verdict(3, "byte-identical", not diffs, "identical" if not diffs else ", ".join(diffs))


def test_c04_work_conservation():
    runs = []
    for name in ("synthetic.json", "regular_vm.json", "burst_serverless.json"):
        for strat in Strategy:
            runs.append((f"{name}/{strat.value}", run_scenario(fixture(name).with_strategy(strat))))
    for seed in range(200):
        runs.append((f"random-{seed}", run_scenario(random_scenario(seed))))
    bad = []
    for label, r in runs:
        busy = r.timeline.busy_by_task()
        done = [t for t in r.tasks if t.finish is not None]
        # tasks cut off by a horizon keep their partial busy time out of the sum
        if sum(busy.get(t.id, 0) for t in done) != sum(t.duration for t in done):
            bad.append(label)
        if any(busy.get(t.id, 0) != t.duration for t in done):
            bad.append(label)
    verdict(4, "busy == durations", not bad, f"{len(runs)} runs, {len(set(bad))} mismatched")


def test_c05_regular_vm_baseline():
    s = summary(run_scenario(fixture("regular_vm.json")))
    ok = s["makespan_after_ready_us"] == 20 * S and s["makespan_us"] == 20 * S
    verdict(5, "makespan", ok, f"{s['makespan_after_ready_us']} us after boot")


REFERENCE_SWEEP = {S // 2: 22 * S, S: 25 * S, 2 * S: 27 * S}
ORACLE_SWEEP = {S // 2: 21_500_014, S: 23_000_014, 2 * S: 26_000_014}


def test_c06_sweep():
    t0 = time.perf_counter()
    base = fixture("synthetic.json")
    got = {iv: summary(run_scenario(base.with_param("scheduler.interval", iv)))["makespan_us"]
           for iv in sorted(REFERENCE_SWEEP)}
    elapsed = time.perf_counter() - t0
    exact = got == ORACLE_SWEEP
    band = all(abs(got[iv] - REFERENCE_SWEEP[iv]) <= 0.15 * REFERENCE_SWEEP[iv] for iv in got)
    vals = [got[iv] for iv in sorted(got)]
    mono = all(a <= b for a, b in zip(vals, vals[1:]))
    verdict(6, "sweep", exact and band and mono and elapsed < 1.0,
            f"makespans {vals} us, exact={exact}, within 15%={band}, monotone={mono}, "
            f"{elapsed * 1000:.0f} ms")


def test_c07_epilogue():
    sc = fixture("synthetic.json")
    r = run_scenario(sc)
    interval = sc.scheduler.interval
    last_finish = max(t.finish for t in r.tasks)
    first_wake = min(t for t, *_, inp, _a in r.transitions if inp == "Wake")
    dormant = [(t, i) for t, _, i, before, _, after in r.transitions
               if after == "WorkerDormant" and before != "WorkerDormant"]
    # the sampler starts when the last worker has parked after boot
    t0 = max(t for t, _ in dormant if t < first_wake)
    stops = sorted((t, i) for t, i in dormant if t > first_wake)
    windows = [(t - t0) // interval for t, _ in stops]
    one_per_tick = (len(stops) == 3 == len({i for _, i in stops})
                    and all(b - a == 1 for a, b in zip(windows, windows[1:])))
    within = stops[-1][0] - last_finish <= 4 * interval
    verdict(7, "epilogue", one_per_tick and within,
            f"workers dormant at {[t - last_finish for t, _ in stops]} us after last finish "
            f"in sampling windows {windows}, limit {4 * interval} us")


def test_c08_latency_ratio():
    base = fixture("synthetic.json")
    w = transition_stats(run_scenario(base))["round_trip_mean_us"]
    h = transition_stats(run_scenario(base.with_strategy("Hotplug")))["round_trip_mean_us"]
    ratio = round(h / w, 2)
    verdict(8, "ratio", (w, h, ratio) == (14, 35_414, 2529.57),
            f"WorkerVcpu {w} us, Hotplug {h} us, ratio {ratio}x")


def test_c09_sampler_overhead():
    f2 = SamplerConfig(2 * S, 20).overhead_fraction
    f05 = SamplerConfig(S // 2, 20).overhead_fraction
    exact = f2 == Fraction(1, 100_000) and f05 == Fraction(4, 100_000)
    bounded = f2 <= Fraction(1, 10_000) and f05 <= Fraction(4, 10_000)
    r = run_scenario(fixture("synthetic.json"))
    accounted = r.sampler_cost_us == 20 * sum(r.sampler_ticks.values())
    verdict(9, "overhead", exact and bounded and accounted,
            f"{float(f2) * 100:.3f}% at 2 s, {float(f05) * 100:.3f}% at 0.5 s, "
            f"{r.sampler_cost_us} us over {sum(r.sampler_ticks.values())} ticks")


@pytest.fixture(scope="module")
def burst_runs():
    base = fixture("burst_serverless.json")
    out = {}
    for strat in ("WorkerVcpu", "FixedWarmKeep", "FixedColdStart"):
        r = run_scenario(base.with_strategy(strat))
        out[strat] = (summary(r)["makespan_us"], cpu_efficiency(r.timeline, r.window()))
    return out


def test_c10_makespan_ordering(burst_runs):
    m = {k: v[0] for k, v in burst_runs.items()}
    verdict(10, "makespan order", m["WorkerVcpu"] < m["FixedWarmKeep"] < m["FixedColdStart"],
            f"{m['WorkerVcpu']} < {m['FixedWarmKeep']} < {m['FixedColdStart']} us")


def test_c10_cold_start_band(burst_runs):
    e = burst_runs["FixedColdStart"][1]
    verdict(10, "cold band", abs(e - 0.494) <= 0.10, f"{e:.3f} vs 0.494 +/- 0.10")


def test_c10_warm_keep_band(burst_runs):
    e = burst_runs["FixedWarmKeep"][1]
    verdict(10, "warm band", abs(e - 0.789) <= 0.10, f"{e:.3f} vs 0.789 +/- 0.10")


def test_c10_worker_vcpu_efficiency(burst_runs):
    # Known gap: the one-wake-per-tick ramp leaves the regular vCPU and the
    # first woken workers idle at the tail, so busy/provisioned tops out near 0.93.
    e = burst_runs["WorkerVcpu"][1]
    verdict(10, "WorkerVcpu >= 0.99", e >= 0.99, f"{e:.4f}")


def _equivalence_pair(seed):
    r = random.Random(seed)
    kind = r.choice(["batch", "burst", "poisson"])
    wl = {"kind": kind, "count": r.randint(1, 6), "duration": r.randint(1, 3 * S),
          "start": r.randint(0, S), "rate": round(r.uniform(0.2, 3.0), 3)}
    if kind == "poisson":
        wl["horizon"] = 5 * S
    elastic = scenario(seed=seed, workload=wl, scheduler={"interval": r.choice([100 * MS, S])},
                       cvms=[{"regular_vcpus": 1, "worker_vcpus": 0, "boot_latency": 0}])
    pooled = scenario(seed=seed, workload=wl,
                      fleet={"strategy": "FixedColdStart", "max_cvms": 1, "warm_pool_size": 1,
                             "cvm_template": {"regular_vcpus": 1, "worker_vcpus": 0}})
    return elastic, pooled


def test_c11_strategy_equivalence():
    diffs = []
    for seed in range(100):
        a, b = _equivalence_pair(seed)
        if timeline_csv(run_scenario(a)) != timeline_csv(run_scenario(b)):
            diffs.append(seed)
    verdict(11, "timelines", not diffs, f"100 workloads, {len(diffs)} differ")


def test_c12_boot_neutrality():
    base = fixture("synthetic.json").with_param("workload.count", 1)
    seen = {}
    for n in range(4):
        r = run_scenario(base.with_param("cvms.0.worker_vcpus", n))
        worker_busy = sum(s.length for v, segs in r.timeline.segments.items()
                          if r.timeline.kinds[v] == "worker"
                          for s in segs if s.state is SegState.ACTIVE_BUSY)
        seen[n] = (r.ready_at, summary(r)["makespan_after_ready_us"], worker_busy)
    ok = len({v[:2] for v in seen.values()}) == 1 and all(v[2] == 0 for v in seen.values())
    verdict(12, "invariant in n", ok,
            ", ".join(f"n={n}: ready {v[0]} after-boot {v[1]}" for n, v in seen.items()))


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
