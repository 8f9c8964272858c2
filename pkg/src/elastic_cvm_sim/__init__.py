"""Discrete-event simulator for elastic confidential VMs with worker vCPUs."""
from .hypervisor import Strategy
from .metrics import RunReport, cpu_efficiency, epilogue_latency, makespan, summary
from .scenario import Scenario, parse_scenario, scenario_from_dict
from .simulation import Simulation, run_scenario

__all__ = [
    "RunReport", "Scenario", "Simulation", "Strategy", "cpu_efficiency", "epilogue_latency",
    "makespan", "parse_scenario", "run_scenario", "scenario_from_dict", "summary",
]

__version__ = "0.1.0"
