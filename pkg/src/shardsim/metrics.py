"""Run metrics computed purely from the event trace.

Latency is measured from client submission to the final commit record across
all involved shards; throughput counts only fully committed transactions.
Because everything derives from the trace, recomputing metrics from a stored
trace file reproduces a run's numbers exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

from .adversary import AttackOutcome, AttackRecord, resolve_attack_outcomes
from .beacon import gas_table
from .model import EventKind, TraceEvent


@dataclass
class LatencyStats:
    count: int
    mean: float
    p50: float
    p95: float

    def as_dict(self) -> dict:
        return {"count": self.count, "mean": round(self.mean, 6),
                "p50": self.p50, "p95": self.p95}


def _percentile(values: list[float], p: float) -> float:
    idx = max(0, min(len(values) - 1, math.ceil(p * len(values)) - 1))
    return values[idx]


def latency_stats(values: list[int]) -> Optional[LatencyStats]:
    if not values:
        return None
    ordered = sorted(values)
    return LatencyStats(
        count=len(ordered),
        mean=sum(ordered) / len(ordered),
        p50=_percentile(ordered, 0.50),
        p95=_percentile(ordered, 0.95),
    )


@dataclass
class MetricsReport:
    protocol: str
    seed: int
    duration: int
    submitted: int
    committed: int
    aborted: int
    tps: float
    intra_latency: Optional[LatencyStats]
    cross_latency: Optional[LatencyStats]
    ccls_interval: Optional[dict]
    attack_records: int
    attack_success_rate: Optional[float]
    gas_estimate: Optional[dict]
    violations: dict[str, int] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "duration": self.duration,
            "submitted": self.submitted,
            "committed": self.committed,
            "aborted": self.aborted,
            "tps": round(self.tps, 6),
            "intra_latency": self.intra_latency.as_dict() if self.intra_latency else None,
            "cross_latency": self.cross_latency.as_dict() if self.cross_latency else None,
            "ccls_interval": self.ccls_interval,
            "attack_records": self.attack_records,
            "attack_success_rate": (round(self.attack_success_rate, 6)
                                    if self.attack_success_rate is not None else None),
            "gas_estimate": self.gas_estimate,
            "violations": dict(sorted(self.violations.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"

    # -- stable CSV surface ----------------------------------------------------

    CSV_COLUMNS = [
        "protocol", "seed", "duration", "submitted", "committed", "aborted", "tps",
        "intra_count", "intra_mean", "intra_p50", "intra_p95",
        "cross_count", "cross_mean", "cross_p50", "cross_p95",
        "ccls_min", "ccls_avg", "ccls_max",
        "attack_records", "attack_success_rate",
        "gas_max", "gas_avg", "gas_min",
        "violations_total",
    ]

    def csv_row(self) -> list[str]:
        def fmt(x) -> str:
            if x is None:
                return ""
            if isinstance(x, float):
                return f"{x:.6f}"
            return str(x)

        intra = self.intra_latency
        cross = self.cross_latency
        ccls = self.ccls_interval or {}
        gas = self.gas_estimate or {}
        return [fmt(v) for v in [
            self.protocol, self.seed, self.duration,
            self.submitted, self.committed, self.aborted, self.tps,
            intra.count if intra else None,
            intra.mean if intra else None,
            intra.p50 if intra else None,
            intra.p95 if intra else None,
            cross.count if cross else None,
            cross.mean if cross else None,
            cross.p50 if cross else None,
            cross.p95 if cross else None,
            ccls.get("min"), ccls.get("avg"), ccls.get("max"),
            self.attack_records, self.attack_success_rate,
            gas.get("max"), gas.get("avg"), gas.get("min"),
            sum(self.violations.values()),
        ]]


def compute_metrics(
    events: list[TraceEvent],
    duration: int,
    protocol: str,
    seed: int,
    attack_records: Optional[list[AttackRecord]] = None,
    violations: Optional[dict[str, int]] = None,
) -> MetricsReport:
    submitted: dict[int, TraceEvent] = {}
    commit_time: dict[int, int] = {}
    aborted: set[int] = set()
    cycle_times: dict[int, int] = {}
    cycle_cl_counts: dict[int, int] = {}
    cycle_tx_counts: dict[int, int] = {}
    for ev in events:
        kind = ev.kind
        if kind == EventKind.SUBMITTED.value:
            submitted.setdefault(ev.subject, ev)
        elif kind == EventKind.COMMITTED.value:
            commit_time[ev.subject] = max(commit_time.get(ev.subject, 0), ev.time)
        elif kind == EventKind.ABORTED.value:
            aborted.add(ev.subject)
        elif kind == EventKind.ORDERED.value:
            cyc = ev.detail["cycle"]
            cycle_times.setdefault(cyc, ev.time)
            if isinstance(ev.subject, str):
                cycle_cl_counts[cyc] = cycle_cl_counts.get(cyc, 0) + 1
            else:
                cycle_tx_counts[cyc] = cycle_tx_counts.get(cyc, 0) + 1

    committed_ids = [txid for txid in commit_time if txid not in aborted]
    intra_lat: list[int] = []
    cross_lat: list[int] = []
    for txid in committed_ids:
        sub = submitted.get(txid)
        if sub is None:
            continue
        lat = commit_time[txid] - sub.detail.get("submit_time", sub.time)
        if sub.detail.get("kind") == "intra_shard":
            intra_lat.append(lat)
        else:
            cross_lat.append(lat)

    ccls_interval = None
    if len(cycle_times) >= 2:
        times = [t for _, t in sorted(cycle_times.items())]
        gaps = [b - a for a, b in zip(times, times[1:])]
        ccls_interval = {
            "min": min(gaps),
            "avg": round(sum(gaps) / len(gaps), 6),
            "max": max(gaps),
            "cycles": len(times),
        }

    gas_estimate = None
    if cycle_cl_counts:
        n = max(cycle_cl_counts.values())
        total_cls = sum(cycle_cl_counts.values())
        total_txs = sum(cycle_tx_counts.values())
        txs_per_cl = max(1, round(total_txs / total_cls)) if total_cls else 1
        gas_estimate = {"n_crosslinks": n, "txs_per_crosslink": txs_per_cl,
                        **gas_table(n, txs_per_cl)}

    rate = None
    if attack_records:
        if any(r.outcome is None for r in attack_records):
            resolve_attack_outcomes(events, attack_records)
        rate = sum(1 for r in attack_records if r.outcome is AttackOutcome.FRONT_RAN) / len(attack_records)

    return MetricsReport(
        protocol=protocol,
        seed=seed,
        duration=duration,
        submitted=len(submitted),
        committed=len(committed_ids),
        aborted=len(aborted),
        tps=len(committed_ids) / duration if duration > 0 else 0.0,
        intra_latency=latency_stats(intra_lat),
        cross_latency=latency_stats(cross_lat),
        ccls_interval=ccls_interval,
        attack_records=len(attack_records or []),
        attack_success_rate=rate,
        gas_estimate=gas_estimate,
        violations=violations or {},
    )
