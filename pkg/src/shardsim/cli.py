"""Command-line front end: run scenarios, sweep parameter axes, audit stored
traces, and print the ordering-phase gas table."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from typing import Optional

from .audit import audit_trace
from .beacon import GasCase, estimate_ordering_gas
from .metrics import MetricsReport, compute_metrics
from .model import ConfigurationError, Trace
from .scenario import ScenarioError, apply_overrides, load_scenario
from .simulator import run_simulation

SWEEP_AXES = ("workload", "byzantine_attackers", "shards", "cross_shard_ratio", "protocol")


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--protocol", help="protocol override (haechi, haechi_sync, "
                                      "two_phase_sender, two_phase_reference, optimistic)")
    p.add_argument("--seed", type=int, help="RNG seed override")
    p.add_argument("--duration", type=int, help="simulated-time horizon override")
    p.add_argument("--shards", type=int, help="regenerate topology with N shards")
    p.add_argument("--workload", type=float, help="client tx rate per shard per time unit")
    p.add_argument("--cross-shard-ratio", type=float, dest="cross_shard_ratio",
                   help="fraction of generated txs that are cross-shard")
    p.add_argument("--adversary", help="adversary model override (none, intra_shard, cross_shard)")


def _load(args) -> "Scenario":
    scenario = load_scenario(args.scenario)
    return apply_overrides(
        scenario,
        protocol=args.protocol,
        seed=args.seed,
        duration=args.duration,
        shards=args.shards,
        workload=args.workload,
        cross_shard_ratio=args.cross_shard_ratio,
        adversary=args.adversary,
    )


def _execute(scenario) -> tuple:
    result = run_simulation(scenario)
    report = audit_trace(result.events)
    metrics = compute_metrics(
        result.events,
        duration=scenario.duration,
        protocol=scenario.protocol.value,
        seed=scenario.seed,
        attack_records=result.attack_records,
        violations=report.counts(),
    )
    return result, report, metrics


def cmd_run(args) -> int:
    scenario = _load(args)
    result, report, metrics = _execute(scenario)
    out_dir = args.out_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    result.trace.write_jsonl(os.path.join(out_dir, "trace.jsonl"))
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        fh.write(metrics.to_json())
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsReport.CSV_COLUMNS)
        writer.writerow(metrics.csv_row())
    with open(os.path.join(out_dir, "audit.json"), "w") as fh:
        fh.write(report.to_json())
    with open(os.path.join(out_dir, "ledgers.json"), "w") as fh:
        json.dump(result.ledgers, fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"run: protocol={scenario.protocol.value} seed={scenario.seed} "
          f"submitted={metrics.submitted} committed={metrics.committed} "
          f"aborted={metrics.aborted} violations={sum(metrics.violations.values())}")
    print(f"wrote trace.jsonl, metrics.json, metrics.csv, audit.json, ledgers.json to {out_dir}")
    return 0


def cmd_sweep(args) -> int:
    if args.vary not in SWEEP_AXES:
        print(f"error: unknown sweep axis {args.vary!r} (choose from {', '.join(SWEEP_AXES)})",
              file=sys.stderr)
        return 2
    base = load_scenario(args.scenario)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
    raw_values = [v for v in args.values.split(",") if v.strip() != ""]
    rows: list[list[str]] = []
    for raw in raw_values:
        for seed in seeds:
            kwargs: dict = {"seed": seed}
            if args.vary == "workload":
                kwargs["workload"] = float(raw)
            elif args.vary == "cross_shard_ratio":
                kwargs["cross_shard_ratio"] = float(raw)
            elif args.vary == "shards":
                kwargs["shards"] = int(raw)
            elif args.vary == "protocol":
                kwargs["protocol"] = raw
            elif args.vary == "byzantine_attackers":
                kwargs["n_attackers"] = int(raw)
            scenario = apply_overrides(base, **kwargs)
            _result, _report, metrics = _execute(scenario)
            rows.append([args.vary, raw, str(seed)] + metrics.csv_row())
    header = ["axis", "value", "seed"] + MetricsReport.CSV_COLUMNS
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            writer.writerows(rows)
        print(f"wrote {len(rows)} rows to {args.out}")
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(header)
        writer.writerows(rows)
    return 0


def cmd_audit(args) -> int:
    events = Trace.read_jsonl(args.trace)
    report = audit_trace(events, contract=args.contract)
    text = report.to_json()
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    counts = report.counts()
    if counts:
        summary = ", ".join(f"{k}={v}" for k, v in sorted(counts.items()))
        print(f"audit: FAIL ({summary})", file=sys.stderr)
        return 1
    print(f"audit: ok ({report.stats['pairs_checked']} pairs, "
          f"{report.stats['cycles_checked']} cycles)", file=sys.stderr)
    return 0


def cmd_gas(args) -> int:
    rows = []
    for case in (GasCase.MAX, GasCase.AVG, GasCase.MIN):
        rows.append((case.value.upper(),
                     estimate_ordering_gas(args.n_crosslinks, args.txs_per_crosslink, case)))
    print(f"gas per tx for {args.n_crosslinks} CrossLinks x "
          f"{args.txs_per_crosslink} txs each:")
    for name, gas in rows:
        print(f"  {name:>3}: {gas:,} gas")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shardsim",
                                     description="cross-shard ordering protocol simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one scenario and write trace + metrics")
    p_run.add_argument("scenario", help="scenario TOML file")
    _add_override_flags(p_run)
    p_run.add_argument("--out-dir", dest="out_dir", help="output directory (default: cwd)")
    p_run.set_defaults(fn=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a scenario across an axis and seeds")
    p_sweep.add_argument("scenario")
    p_sweep.add_argument("--vary", required=True, help=f"axis: {', '.join(SWEEP_AXES)}")
    p_sweep.add_argument("--values", required=True, help="comma-separated axis values")
    p_sweep.add_argument("--seeds", default="0", help="comma-separated seeds")
    p_sweep.add_argument("--out", help="CSV output path (default: stdout)")
    p_sweep.set_defaults(fn=cmd_sweep)

    p_audit = sub.add_parser("audit", help="audit a stored trace")
    p_audit.add_argument("trace", help="trace JSONL file")
    p_audit.add_argument("--report", help="write the JSON report here instead of stdout")
    p_audit.add_argument("--contract", help="restrict the fairness check to one contract")
    p_audit.set_defaults(fn=cmd_audit)

    p_gas = sub.add_parser("gas", help="print the ordering-phase gas table")
    p_gas.add_argument("n_crosslinks", type=int)
    p_gas.add_argument("txs_per_crosslink", type=int)
    p_gas.set_defaults(fn=cmd_gas)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ScenarioError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
