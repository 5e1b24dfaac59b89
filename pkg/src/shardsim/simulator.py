"""Deterministic discrete-event simulation binding shards, beacon chain,
network, workload, and adversary.

Event order is a pure function of (scenario, seed): the heap is keyed by
(time, insertion sequence) and every source of work is either scheduled up
front (client submissions, first ticks) or derives from handling an earlier
event.  A run ends when the horizon is reached or when nothing unresolved
remains and no further submissions can arrive.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Optional

from .adversary import Adversary, PlannedInjection, resolve_attack_outcomes
from .beacon import BeaconOrderer, SyncOrderer
from .contracts import make_contract_state
from .engine import (
    CallListMessage,
    ClientSubmission,
    CommitmentDecision,
    CrossLinkMessage,
    EngineError,
    HaechiShardNode,
    HaechiSyncShardNode,
    ProceedMessage,
    ShardConfig,
    ShardNode,
)
from .model import (
    BEACON_SHARD,
    AccountRef,
    EventKind,
    Trace,
    TraceEvent,
    Transaction,
    TransactionFactory,
)
from .protocols import OptimisticShardNode, ProtocolKind, TwoPhaseShardNode
from .scenario import AdversaryModel, Scenario, build_transactions


class BeaconNode:
    """Ordering-phase host: receives CrossLinks, fires cycles, ships call
    lists (and, for the sync strawman, height-proceed notices)."""

    def __init__(self, env: "Simulation", interval: int, shard_ids: list[int], sync: bool):
        self.env = env
        self.shard = BEACON_SHARD
        self.interval = interval
        self.sync = sync
        if sync:
            self.orderer = SyncOrderer(shard_ids)
        else:
            self.orderer = BeaconOrderer(shard_ids)

    def on_message(self, msg: object, now: int) -> None:
        if not isinstance(msg, CrossLinkMessage):
            raise EngineError(f"beacon: unexpected message {type(msg).__name__}")
        cl = msg.cl
        self.env.trace.append(
            now, EventKind.CROSSLINK_RECEIVED, cl.cl_id, BEACON_SHARD,
            shard=cl.shard, height=cl.height, block_ts=cl.block_ts,
            txids=[t.txid for t in cl.txs],
            duplicate=self.orderer.has_seen(cl.shard, cl.height),
        )
        self.orderer.on_crosslink(cl)
        ccls = self.orderer.try_order_cycle()
        if ccls is not None:
            self._emit(ccls, now)

    def _emit(self, ccls, now: int) -> None:
        tr = self.env.trace
        for cl in ccls.selected:
            tr.append(now, EventKind.ORDERED, cl.cl_id, BEACON_SHARD,
                      cycle=ccls.cycle, end_ts=ccls.end_ts, shard=cl.shard,
                      height=cl.height, block_ts=cl.block_ts)
        info = {}
        for entries in ccls.lists.values():
            for e in entries:
                info[e.txid] = e
        for pos, txid in enumerate(ccls.order):
            e = info[txid]
            tr.append(now, EventKind.ORDERED, txid, BEACON_SHARD,
                      cycle=ccls.cycle, position=pos,
                      source_shard=e.source_shard, source_height=e.source_height,
                      index=e.index, order_ts=e.order_ts, end_ts=ccls.end_ts)
        txmap = {tx.txid: tx for cl in ccls.selected for tx in cl.txs}
        for shard, entries in ccls.lists.items():
            self.env.send(BEACON_SHARD, shard,
                          CallListMessage(ccls.cycle, tuple((e, txmap[e.txid]) for e in entries)),
                          extra_delay=self.interval)
        if self.sync:
            height = ccls.selected[0].height
            for shard in self.env.shard_ids:
                self.env.send(BEACON_SHARD, shard, ProceedMessage(height),
                              extra_delay=self.interval)


@dataclass
class SimResult:
    scenario: Scenario
    trace: Trace
    attack_records: list
    ledgers: dict[int, dict]
    decisions: list[CommitmentDecision] = field(default_factory=list)

    @property
    def events(self) -> list[TraceEvent]:
        return self.trace.events


_NODE_CLASSES = {
    ProtocolKind.HAECHI: HaechiShardNode,
    ProtocolKind.HAECHI_SYNC: HaechiSyncShardNode,
    ProtocolKind.TWO_PHASE_SENDER: TwoPhaseShardNode,
    ProtocolKind.TWO_PHASE_REFERENCE: TwoPhaseShardNode,
    ProtocolKind.OPTIMISTIC: OptimisticShardNode,
}


class Simulation:
    def __init__(self, scenario: Scenario):
        scenario.validate()
        self.scenario = scenario
        self.trace = Trace()
        self.now = 0
        self._heap: list[tuple[int, int, str, object]] = []
        self._seq = 0
        self.future_submissions = 0
        #: unresolved txids -> shards still owing a terminal record (None
        #: while the involved set is not yet known)
        self.pending: dict[int, Optional[set[int]]] = {}
        self.txs: dict[int, Transaction] = {}
        self.decisions: list[CommitmentDecision] = []
        self.shard_ids = scenario.shard_ids()
        self.reference_shard = scenario.effective_reference_shard()
        self.factory = TransactionFactory(self.shard_ids)
        self.adversary = Adversary(self, scenario.adversary)

        balances: dict[int, dict[str, int]] = {s: {} for s in self.shard_ids}
        for acct in scenario.accounts:
            balances[acct.shard][acct.id] = acct.coins
        if self.adversary.active:
            if scenario.adversary.model is AdversaryModel.INTRA_SHARD:
                attacker_shards = sorted({c.shard for c in scenario.contracts})
            else:
                attacker_shards = [scenario.adversary.attacker_account_shard]
            for s in attacker_shards:
                name = f"attacker_{s}"
                self.adversary.accounts[s] = AccountRef(name, s)
                balances[s][name] = scenario.adversary.funds

        contracts: dict[int, dict] = {s: {} for s in self.shard_ids}
        for c in scenario.contracts:
            contracts[c.shard][c.id] = make_contract_state(c.id, c.kind, c.genesis)

        node_cls = _NODE_CLASSES[scenario.protocol]
        self.nodes: dict[int, object] = {}
        for spec in scenario.shards:
            lead = scenario.network.delay(spec.id, spec.id)
            if (self.adversary.active and scenario.adversary.observation_lead is not None
                    and spec.id in scenario.adversary.observer_shards):
                lead = scenario.adversary.observation_lead
            config = ShardConfig(
                shard=spec.id,
                block_interval=spec.block_interval,
                max_block_txs=spec.max_block_txs,
                halt_at=spec.halt_at,
                proposal_lead=lead,
            )
            self.nodes[spec.id] = node_cls(self, config, balances[spec.id], contracts[spec.id])
        if scenario.protocol.ordered:
            self.nodes[BEACON_SHARD] = BeaconNode(
                self, scenario.beacon_interval, self.shard_ids,
                sync=scenario.protocol is ProtocolKind.HAECHI_SYNC,
            )

        for tx in build_transactions(scenario, self.factory):
            self.txs[tx.txid] = tx
            self.future_submissions += 1
            self._push(tx.submit_time, "msg", (tx.sender.shard, ClientSubmission(tx)))

        for spec in scenario.shards:
            self.schedule_tick(self.nodes[spec.id], spec.block_interval)

    # -- scheduling ------------------------------------------------------------

    def _push(self, time: int, action: str, payload: object) -> None:
        heapq.heappush(self._heap, (time, self._seq, action, payload))
        self._seq += 1

    def delay(self, src: int, dst: int) -> int:
        return self.scenario.network.delay(src, dst)

    def send(self, src: int, dst: int, msg: object, extra_delay: int = 0) -> None:
        self._push(self.now + self.delay(src, dst) + extra_delay, "msg", (dst, msg))

    def can_idle(self) -> bool:
        return not self.pending and self.future_submissions == 0

    def schedule_tick(self, node: ShardNode, time: int) -> None:
        if self.can_idle():
            return
        if node.config.halt_at is not None and time >= node.config.halt_at:
            return
        if self.adversary.observes(node.shard):
            self._push(time - node.config.proposal_lead, "preview", (node, time))
        self._push(time, "tick", node)

    # -- transaction bookkeeping --------------------------------------------------

    def tx_submitted(self, txid: int) -> None:
        self.future_submissions -= 1
        if txid not in self.pending:
            self.pending[txid] = None

    def expect_terminals(self, txid: int, shards: set[int]) -> None:
        self.pending[txid] = set(shards)

    def mark_terminal(self, txid: int, shard: int) -> None:
        remaining = self.pending.get(txid)
        if remaining is None:
            return
        remaining.discard(shard)
        if not remaining:
            del self.pending[txid]

    def record_decision(self, decision: CommitmentDecision) -> None:
        self.decisions.append(decision)

    def tx_by_id(self, txid: int) -> Transaction:
        return self.txs[txid]

    # -- adversary handlers ----------------------------------------------------------

    def _handle_preview(self, node: ShardNode, tick_time: int, now: int) -> None:
        if node.halted(tick_time):
            return
        plans = self.adversary.on_preview(node.proposal_preview(tick_time), node.shard, now)
        for plan in plans:
            self.future_submissions += 1
            self._push(plan.send_time, "inject", plan)

    def _handle_inject(self, plan: PlannedInjection, now: int) -> None:
        self.trace.append(
            now, EventKind.ADVERSARY_INJECTED, plan.tx.txid, plan.observer_shard,
            victim=plan.victim_txid, target_shard=plan.target_shard,
            contract=plan.tx.contract.contract,
        )
        self.txs[plan.tx.txid] = plan.tx
        self.send(plan.observer_shard, plan.target_shard, ClientSubmission(plan.tx))

    # -- main loop ---------------------------------------------------------------------

    def run(self) -> SimResult:
        duration = self.scenario.duration
        while self._heap:
            time, _seq, action, payload = heapq.heappop(self._heap)
            if time > duration:
                break
            self.now = time
            if action == "tick":
                payload.on_tick(time)
            elif action == "msg":
                dst, msg = payload
                self.nodes[dst].on_message(msg, time)
            elif action == "preview":
                node, tick_time = payload
                self._handle_preview(node, tick_time, time)
            elif action == "inject":
                self._handle_inject(payload, time)
        resolve_attack_outcomes(self.trace.events, self.adversary.records)
        ledgers = {
            shard: node.ledger_dump()
            for shard, node in sorted(self.nodes.items())
            if shard != BEACON_SHARD
        }
        return SimResult(
            scenario=self.scenario,
            trace=self.trace,
            attack_records=self.adversary.records,
            ledgers=ledgers,
            decisions=self.decisions,
        )


def run_simulation(scenario: Scenario) -> SimResult:
    """Build and run one deterministic simulation of ``scenario``."""
    return Simulation(scenario).run()
