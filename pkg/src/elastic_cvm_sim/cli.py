"""Command-line front end: ``elastic-cvm-sim run|compare|sweep``."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .hypervisor import Strategy
from .metrics import summary, write_all
from .scenario import ParseError, Scenario, ScenarioValidationError, parse_scenario
from .simulation import run_scenario

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_SIM = 3

COMPARE_HEADER = ["strategy", "makespan_us", "cpu_efficiency", "total_transitions", "total_boot_us"]
SWEEP_HEADER = ["value", "makespan_us", "cpu_efficiency"]


def _fmt_eff(x) -> str:
    return "" if x is None else f"{x:.6f}"


def cmd_run(scenario: Scenario, out_dir: Path) -> dict:
    report = run_scenario(scenario)
    write_all(report, out_dir)
    (Path(out_dir) / "scenario.json").write_text(scenario.to_json())
    return summary(report)


def cmd_compare(scenario: Scenario, strategies: list[str], out_dir: Path) -> list[dict]:
    rows = []
    for name in sorted(set(strategies)):
        variant = scenario.with_strategy(name)
        s = cmd_run(variant, Path(out_dir) / name)
        rows.append({"strategy": name, "makespan_us": s["makespan_us"],
                     "cpu_efficiency": s["cpu_efficiency"],
                     "total_transitions": s["total_transitions"],
                     "total_boot_us": s["total_boot_us"]})
    with open(Path(out_dir) / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARE_HEADER)
        for r in rows:
            w.writerow([r["strategy"], r["makespan_us"], _fmt_eff(r["cpu_efficiency"]),
                        r["total_transitions"], r["total_boot_us"]])
    return rows


def _get_path(data: dict, dotted: str):
    node = data
    for p in dotted.split("."):
        node = node[int(p)] if isinstance(node, list) else node[p]
    return node


def cmd_sweep(scenario: Scenario, param: str, values: list[str], out_dir: Path) -> list[dict]:
    variants = []
    for raw in values:
        v = scenario.with_param(param, raw)
        variants.append((_get_path(v.to_dict(), param), raw, v))
    variants.sort(key=lambda t: t[0])
    rows = []
    for resolved, raw, v in variants:
        s = cmd_run(v, Path(out_dir) / f"{param}={raw}")
        rows.append({"value": resolved, "makespan_us": s["makespan_us"],
                     "cpu_efficiency": s["cpu_efficiency"]})
    with open(Path(out_dir) / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r["value"], r["makespan_us"], _fmt_eff(r["cpu_efficiency"])])
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="elastic-cvm-sim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("scenario")
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)

    c = sub.add_parser("compare", help="run one workload under several strategies")
    c.add_argument("scenario")
    c.add_argument("--strategies", required=True,
                   help="comma list of " + ",".join(s.value for s in Strategy))
    c.add_argument("--out", required=True)
    c.add_argument("--seed", type=int)

    s = sub.add_parser("sweep", help="vary one numeric scenario field")
    s.add_argument("scenario")
    s.add_argument("--param", required=True, help="dotted path, e.g. scheduler.interval")
    s.add_argument("--values", required=True, help="comma list, e.g. 0.5s,1s,2s")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        scenario = parse_scenario(args.scenario)
        if args.seed is not None:
            scenario = scenario.with_param("seed", args.seed)
        if args.command == "compare":
            strategies = [x.strip() for x in args.strategies.split(",") if x.strip()]
            for name in strategies:
                Strategy(name)
        elif args.command == "sweep":
            values = [x.strip() for x in args.values.split(",") if x.strip()]
            for raw in values:
                scenario.with_param(args.param, raw)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ParseError, ScenarioValidationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID

    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "run":
            s = cmd_run(scenario, out)
            print(f"{scenario.name}: makespan {s['makespan_us']} us, efficiency {_fmt_eff(s['cpu_efficiency'])}")
        elif args.command == "compare":
            for r in cmd_compare(scenario, strategies, out):
                print(f"{r['strategy']:<15} makespan {r['makespan_us']:>12} us  "
                      f"efficiency {_fmt_eff(r['cpu_efficiency'])}")
        else:
            for r in cmd_sweep(scenario, args.param, values, out):
                print(f"{args.param}={r['value']}: makespan {r['makespan_us']} us")
    except Exception as exc:  # any failure inside a run is a simulation error
        logging.getLogger(__name__).debug("simulation failed", exc_info=True)
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
