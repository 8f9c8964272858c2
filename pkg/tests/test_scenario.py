import json

import pytest
from hypothesis import given, strategies as st

from elastic_cvm_sim.scenario import (ParseError, Scenario, ScenarioValidationError, parse_duration,
                                      parse_scenario, scenario_from_dict)
from tests.helpers import fixture


def test_synthetic_fixture():
    sc = fixture("synthetic.json")
    c = sc.cvms[0]
    assert (c.regular_vcpus, c.worker_vcpus) == (1, 3)
    assert (sc.workload.kind, sc.workload.count, sc.workload.duration) == ("batch", 4, 20_000_000)
    assert sc.scheduler.interval == 2_000_000


def test_defaults():
    sc = scenario_from_dict({})
    assert sc.seed == 0 and sc.latencies.wake == 7 and sc.scheduler.per_vm_cost == 20


@pytest.mark.parametrize("text,us", [("10.36s", 10_360_000), ("20ms", 20_000), ("14us", 14),
                                     (7, 7), ("42", 42), (".5s", 500_000)])
def test_durations(text, us):
    assert parse_duration(text) == us


@pytest.mark.parametrize("bad", ["1.5us", "-1s", "fast", True, 1.5, -3])
def test_bad_durations(bad):
    with pytest.raises(ValueError):
        parse_duration(bad)


def test_threshold_order_rejected():
    with pytest.raises(ScenarioValidationError):
        scenario_from_dict({"scheduler": {"wake_threshold": 0.5, "sleep_threshold": 0.5}})


def test_unknown_key_names_path():
    with pytest.raises(ScenarioValidationError, match="scheduler.bogus"):
        scenario_from_dict({"scheduler": {"bogus": 1}})


def test_bad_override_rejected():
    with pytest.raises(ScenarioValidationError):
        scenario_from_dict({"strategy_overrides": {"Hotplug": {"fleet": {"max_cvms": 0}}}})


def test_parse_error_position(tmp_path):
    p = tmp_path / "s.json"
    p.write_text('{\n  "seed": ,\n}')
    with pytest.raises(ParseError, match=r"s.json:2:"):
        parse_scenario(p)


def test_with_strategy_merges_override():
    sc = fixture("burst_serverless.json").with_strategy("FixedColdStart")
    assert sc.fleet.strategy == "FixedColdStart" and sc.fleet.max_cvms == 4
    assert sc.workload.distinct_functions


def test_with_param():
    sc = fixture("synthetic.json").with_param("scheduler.interval", "0.5s")
    assert sc.scheduler.interval == 500_000
    with pytest.raises(ScenarioValidationError):
        sc.with_param("scheduler.nope", 1)


def test_fixture_round_trip():
    for name in ("synthetic.json", "regular_vm.json", "burst_serverless.json"):
        sc = fixture(name)
        again = scenario_from_dict(json.loads(sc.to_json()))
        assert again == sc and again.to_json() == sc.to_json()


@given(st.integers(0, 10**12), st.sampled_from(["us", "ms", "s"]))
def test_duration_literals_round_trip(n, unit):
    scale = {"us": 1, "ms": 1_000, "s": 1_000_000}[unit]
    assert parse_duration(f"{n}{unit}") == n * scale


@given(st.integers(0, 2**63), st.integers(1, 5), st.integers(0, 5), st.integers(0, 10**9))
def test_scenario_round_trip(seed, m, n, boot):
    sc = Scenario(seed=seed, cvms=[{"regular_vcpus": m, "worker_vcpus": n, "boot_latency": boot}])
    assert scenario_from_dict(json.loads(sc.to_json())) == sc
