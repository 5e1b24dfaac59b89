"""Post-hoc trace auditor.

Pure functions over a finished event trace that decide, for this finite run,
whether the recorded behavior satisfies the fairness, safety, and liveness
properties the protocols claim.  Every violation carries the event sequence
numbers that prove it, so findings are replayable against the stored trace.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

from .model import EventKind, TraceEvent


class Order(Enum):
    BEFORE = "before"
    AFTER = "after"
    INCOMPARABLE = "incomparable"


class ViolationKind(str, Enum):
    FAIRNESS_INVERSION = "FairnessInversion"
    SAFETY_DIVERGENCE = "SafetyDivergence"
    ATOMICITY_BREAK = "AtomicityBreak"
    LIVENESS_STALL = "LivenessStall"
    LEMMA1_BREACH = "Lemma1Breach"
    LEMMA2_BREACH = "Lemma2Breach"
    GAP_IN_ORDERED_HEIGHTS = "GapInOrderedHeights"


@dataclass(frozen=True)
class Violation:
    kind: ViolationKind
    evidence: dict

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "evidence": self.evidence}


@dataclass
class AuditReport:
    violations: list[Violation]
    assumptions: list[str]
    stats: dict

    @property
    def ok(self) -> bool:
        return not self.violations

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for v in self.violations:
            out[v.kind.value] = out.get(v.kind.value, 0) + 1
        return out

    def as_dict(self) -> dict:
        return {
            "violations": [v.as_dict() for v in self.violations],
            "assumptions": self.assumptions,
            "stats": self.stats,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), sort_keys=True, indent=2) + "\n"


# ---------------------------------------------------------------------------
# Trace indexing.

@dataclass(frozen=True)
class ProcessedAt:
    shard: int
    height: int
    index: int
    block_ts: int
    seq: int


@dataclass
class CrossLinkInfo:
    shard: int
    height: int
    block_ts: int = 0
    sent_seq: Optional[int] = None
    received_time: Optional[int] = None
    received_seq: Optional[int] = None
    ordered_cycle: Optional[int] = None


@dataclass
class CycleInfo:
    cycle: int
    time: int
    end_ts: int = 0
    cls: list[tuple[int, int, int]] = field(default_factory=list)  # (shard, height, block_ts)
    order: list[dict] = field(default_factory=list)  # per-tx Ordered details + seq


class TraceIndex:
    """One pass over the events; every check reads from here."""

    def __init__(self, events: list[TraceEvent]):
        self.events = events
        self.submitted: dict[int, TraceEvent] = {}
        self.processed: dict[int, ProcessedAt] = {}
        self.executions: dict[str, list[TraceEvent]] = {}
        self.exec_contracts: dict[int, list[str]] = {}
        self.ordered_txids: set[int] = set()
        self.terminals: dict[int, dict[int, TraceEvent]] = {}
        self.terminal_order: dict[int, list[TraceEvent]] = {}
        self.dependencies: dict[int, set[int]] = {}
        self.crosslinks: dict[tuple[int, int], CrossLinkInfo] = {}
        self.cycles: dict[int, CycleInfo] = {}
        for ev in events:
            kind = ev.kind
            if kind == EventKind.SUBMITTED.value:
                self.submitted.setdefault(ev.subject, ev)
            elif kind == EventKind.PROCESSED.value:
                self.processed.setdefault(ev.subject, ProcessedAt(
                    shard=ev.location, height=ev.detail["height"],
                    index=ev.detail["index"], block_ts=ev.detail["block_ts"],
                    seq=ev.seq,
                ))
            elif kind == EventKind.EXECUTED.value:
                contract = ev.detail.get("contract")
                self.executions.setdefault(contract, []).append(ev)
                got = self.exec_contracts.setdefault(ev.subject, [])
                if contract not in got:
                    got.append(contract)
            elif kind in (EventKind.COMMITTED.value, EventKind.ABORTED.value):
                per_shard = self.terminals.setdefault(ev.subject, {})
                if ev.location not in per_shard:
                    per_shard[ev.location] = ev
                    self.terminal_order.setdefault(ev.location, []).append(ev)
            elif kind == EventKind.VOTED.value:
                deps = ev.detail.get("dependency")
                if deps:
                    self.dependencies.setdefault(ev.subject, set()).update(deps)
            elif kind == EventKind.CROSSLINK_SENT.value:
                info = self._cl(ev.detail["shard"], ev.detail["height"])
                info.block_ts = ev.detail["block_ts"]
                info.sent_seq = ev.seq
            elif kind == EventKind.CROSSLINK_RECEIVED.value:
                info = self._cl(ev.detail["shard"], ev.detail["height"])
                info.block_ts = ev.detail["block_ts"]
                if info.received_time is None and not ev.detail.get("duplicate", False):
                    info.received_time = ev.time
                    info.received_seq = ev.seq
            elif kind == EventKind.ORDERED.value:
                cycle = self.cycles.setdefault(
                    ev.detail["cycle"], CycleInfo(ev.detail["cycle"], ev.time))
                cycle.end_ts = ev.detail["end_ts"]
                if isinstance(ev.subject, str):
                    shard, height = ev.detail["shard"], ev.detail["height"]
                    cycle.cls.append((shard, height, ev.detail["block_ts"]))
                    info = self._cl(shard, height)
                    info.block_ts = ev.detail["block_ts"]
                    info.ordered_cycle = ev.detail["cycle"]
                else:
                    cycle.order.append({"txid": ev.subject, "seq": ev.seq, **ev.detail})
                    self.ordered_txids.add(ev.subject)

    def _cl(self, shard: int, height: int) -> CrossLinkInfo:
        return self.crosslinks.setdefault((shard, height), CrossLinkInfo(shard, height))

    def execution_sequence(self, contract: str) -> list[TraceEvent]:
        """First execution event per txid at ``contract``, in trace order."""
        seen: set[int] = set()
        out = []
        for ev in self.executions.get(contract, []):
            if ev.subject not in seen:
                seen.add(ev.subject)
                out.append(ev)
        return out


# ---------------------------------------------------------------------------
# Processing order (partial order over transactions).

def processing_order(index: TraceIndex, tx1: int, tx2: int) -> Order:
    """Order in which two transactions were first packed into blocks.

    Same block: by in-block index.  Same shard: by height.  Different shards:
    by block timestamp, with equal timestamps incomparable.
    """
    try:
        a, b = index.processed[tx1], index.processed[tx2]
    except KeyError as exc:
        raise ValueError(f"tx {exc.args[0]} was never processed") from None
    if a.shard == b.shard:
        if (a.height, a.index) == (b.height, b.index):
            return Order.INCOMPARABLE
        return Order.BEFORE if (a.height, a.index) < (b.height, b.index) else Order.AFTER
    if a.block_ts == b.block_ts:
        return Order.INCOMPARABLE
    return Order.BEFORE if a.block_ts < b.block_ts else Order.AFTER


# ---------------------------------------------------------------------------
# Finalization fairness (first-processing first-execution).

def check_finalization_fairness(index: TraceIndex, contract: Optional[str] = None) -> list[Violation]:
    """Flag every contract where some later-processed transaction executed
    before an earlier-processed one.

    Scans each contract's execution sequence once, tracking the maximum
    processing position seen so far per shard and the two highest distinct
    shard block timestamps, which together witness any inversion under the
    processing-order definition.
    """
    violations: list[Violation] = []
    contracts = [contract] if contract is not None else sorted(
        c for c in index.executions if c is not None)
    for cid in contracts:
        per_shard_max: dict[int, tuple[int, int, int, int]] = {}  # shard -> (h, idx, txid, seq)
        best1: Optional[tuple[int, int, int, int]] = None  # (ts, shard, txid, seq)
        best2: Optional[tuple[int, int, int, int]] = None  # distinct shard from best1
        for ev in index.execution_sequence(cid):
            txid = ev.subject
            proc = index.processed.get(txid)
            if proc is None:
                continue
            witness = per_shard_max.get(proc.shard)
            if witness is not None and (proc.height, proc.index) < (witness[0], witness[1]):
                violations.append(Violation(ViolationKind.FAIRNESS_INVERSION, {
                    "contract": cid,
                    "earlier_processed": txid,
                    "later_processed": witness[2],
                    "execution_seq": ev.seq,
                    "witness_execution_seq": witness[3],
                    "rule": "same_shard",
                }))
            cross = best1 if (best1 is not None and best1[1] != proc.shard) else best2
            if cross is not None and proc.block_ts < cross[0]:
                violations.append(Violation(ViolationKind.FAIRNESS_INVERSION, {
                    "contract": cid,
                    "earlier_processed": txid,
                    "later_processed": cross[2],
                    "execution_seq": ev.seq,
                    "witness_execution_seq": cross[3],
                    "rule": "cross_shard_timestamp",
                }))
            entry = (proc.height, proc.index, txid, ev.seq)
            cur = per_shard_max.get(proc.shard)
            if cur is None or (entry[0], entry[1]) > (cur[0], cur[1]):
                per_shard_max[proc.shard] = entry
            ts_entry = (proc.block_ts, proc.shard, txid, ev.seq)
            if best1 is None:
                best1 = ts_entry
            elif proc.shard == best1[1]:
                if proc.block_ts > best1[0]:
                    best1 = ts_entry
            elif proc.block_ts > best1[0]:
                best2 = best1
                best1 = ts_entry
            elif best2 is None or proc.block_ts > best2[0]:
                best2 = ts_entry
    return violations


# ---------------------------------------------------------------------------
# Sharded-system safety.

ASSUMPTIONS = [
    "replica-level prefix consistency is structural: one engine per shard stands in for its honest replicas",
]


def check_safety(index: TraceIndex) -> list[Violation]:
    """Atomicity (all involved shards take the same commit/abort action) and
    cross-shard agreement on the relative commitment order of transactions
    that call a common contract."""
    violations: list[Violation] = []
    for txid, per_shard in sorted(index.terminals.items()):
        outcomes = {ev.kind for ev in per_shard.values()}
        if len(outcomes) > 1:
            violations.append(Violation(ViolationKind.ATOMICITY_BREAK, {
                "txid": txid,
                "decisions": {str(shard): ev.kind for shard, ev in sorted(per_shard.items())},
                "seqs": [ev.seq for _, ev in sorted(per_shard.items())],
            }))
    shards = sorted(index.terminal_order)
    for i, a in enumerate(shards):
        pos_a = {ev.subject: p for p, ev in enumerate(index.terminal_order[a])}
        for b in shards[i + 1:]:
            pos_b = {ev.subject: p for p, ev in enumerate(index.terminal_order[b])}
            common = [txid for txid in pos_b if txid in pos_a]
            groups: dict[str, list[int]] = {}
            for txid in common:
                for contract in index.exec_contracts.get(txid, ()):
                    groups.setdefault(contract, []).append(txid)
            for contract, txids in sorted(groups.items()):
                ordered = sorted(txids, key=lambda t: pos_a[t])
                for t1, t2 in zip(ordered, ordered[1:]):
                    if pos_b[t2] < pos_b[t1]:
                        violations.append(Violation(ViolationKind.SAFETY_DIVERGENCE, {
                            "shards": [a, b],
                            "contract": contract,
                            "tx_pair": [t1, t2],
                            "seqs": [index.terminals[t1][a].seq, index.terminals[t2][b].seq],
                        }))
                        break
    return violations


# ---------------------------------------------------------------------------
# Liveness.

def _last_stage(index: TraceIndex, txid: int) -> str:
    stage = EventKind.SUBMITTED.value
    if txid in index.processed:
        stage = EventKind.PROCESSED.value
    if txid in index.ordered_txids:
        stage = EventKind.ORDERED.value
    if txid in index.exec_contracts:
        stage = EventKind.EXECUTED.value
    return stage


def check_liveness(index: TraceIndex, horizon: Optional[int] = None) -> list[Violation]:
    """Every submitted transaction must reach a commit or abort record at
    every shard that owes it one."""
    violations: list[Violation] = []
    for txid, sub in sorted(index.submitted.items()):
        per_shard = index.terminals.get(txid, {})
        if not per_shard:
            violations.append(Violation(ViolationKind.LIVENESS_STALL, {
                "txid": txid,
                "stalled_after": _last_stage(index, txid),
                "submitted_seq": sub.seq,
            }))
            continue
        if any(ev.detail.get("reason") for ev in per_shard.values()):
            continue  # rejected at processing: terminal at the home shard only
        expected = {sub.location}
        if sub.detail.get("contract_shard") is not None:
            expected.add(sub.detail["contract_shard"])
        if sub.detail.get("recipient_shard") is not None:
            expected.add(sub.detail["recipient_shard"])
        expected |= index.dependencies.get(txid, set())
        missing = sorted(expected - set(per_shard))
        if missing:
            violations.append(Violation(ViolationKind.LIVENESS_STALL, {
                "txid": txid,
                "stalled_after": _last_stage(index, txid),
                "missing_shards": missing,
            }))
    return violations


# ---------------------------------------------------------------------------
# Ordering-phase lemmas.

def check_lemmas(index: TraceIndex) -> list[Violation]:
    """Per ordering cycle: no unordered CrossLink may carry a timestamp at or
    below anything ordered in the cycle (in-flight safety); the merged order
    never inverts a strict timestamp or same-CrossLink index constraint; and
    the ordered heights per shard stay gap-free from height one."""
    violations: list[Violation] = []
    for cycle_id in sorted(index.cycles):
        cycle = index.cycles[cycle_id]
        if not cycle.cls:
            continue
        max_ordered_ts = max(ts for _, _, ts in cycle.cls)
        for (shard, height), info in sorted(index.crosslinks.items()):
            unordered = info.ordered_cycle is None or info.ordered_cycle > cycle_id
            if unordered and info.block_ts <= max_ordered_ts:
                violations.append(Violation(ViolationKind.LEMMA1_BREACH, {
                    "cycle": cycle_id,
                    "crosslink": [shard, height],
                    "crosslink_ts": info.block_ts,
                    "max_ordered_ts": max_ordered_ts,
                }))
        order = cycle.order
        for j in range(len(order)):
            for i in range(j):
                a, b = order[i], order[j]
                ts_a = index.crosslinks[(a["source_shard"], a["source_height"])].block_ts
                ts_b = index.crosslinks[(b["source_shard"], b["source_height"])].block_ts
                if ts_b < ts_a:
                    violations.append(Violation(ViolationKind.LEMMA2_BREACH, {
                        "cycle": cycle_id,
                        "tx_pair": [a["txid"], b["txid"]],
                        "timestamps": [ts_a, ts_b],
                        "seqs": [a["seq"], b["seq"]],
                    }))
                elif (a["source_shard"], a["source_height"]) == (b["source_shard"], b["source_height"]) \
                        and b["index"] < a["index"]:
                    violations.append(Violation(ViolationKind.LEMMA2_BREACH, {
                        "cycle": cycle_id,
                        "tx_pair": [a["txid"], b["txid"]],
                        "indexes": [a["index"], b["index"]],
                        "seqs": [a["seq"], b["seq"]],
                    }))
    ordered_heights: dict[int, list[int]] = {}
    for (shard, height), info in index.crosslinks.items():
        if info.ordered_cycle is not None:
            ordered_heights.setdefault(shard, []).append(height)
    for shard, heights in sorted(ordered_heights.items()):
        heights.sort()
        if heights != list(range(1, len(heights) + 1)):
            violations.append(Violation(ViolationKind.GAP_IN_ORDERED_HEIGHTS, {
                "shard": shard,
                "ordered_heights": heights,
            }))
    return violations


# ---------------------------------------------------------------------------
# Full audit.

def audit_trace(events: list[TraceEvent], horizon: Optional[int] = None,
                contract: Optional[str] = None) -> AuditReport:
    index = TraceIndex(events)
    violations: list[Violation] = []
    violations += check_finalization_fairness(index, contract=contract)
    violations += check_safety(index)
    violations += check_liveness(index, horizon=horizon)
    if index.cycles:
        violations += check_lemmas(index)
    pairs = 0
    for cid in index.executions:
        k = len(index.execution_sequence(cid))
        pairs += k * (k - 1) // 2
    stats = {
        "events": len(events),
        "txs_submitted": len(index.submitted),
        "pairs_checked": pairs,
        "cycles_checked": len(index.cycles),
        "contracts": len([c for c in index.executions if c is not None]),
    }
    return AuditReport(violations=violations, assumptions=list(ASSUMPTIONS), stats=stats)
