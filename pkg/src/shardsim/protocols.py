"""Baseline cross-shard protocols sharing the shard engine's ledger model.

Two vote-then-commit variants (sender-coordinated and reference-shard
coordinated) that lock contract data between execution and commitment, and
the optimistic protocol that executes relays in arrival order with no lock
window and aborts on failure.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .contracts import StateSnapshot, execute_call, rollback, take_snapshot
from .engine import (
    DecisionNotice,
    RelayMessage,
    ShardNode,
    VoteMessage,
)
from .model import CommitOutcome, EventKind, Transaction, TxKind


class ProtocolKind(str, Enum):
    HAECHI = "haechi"
    HAECHI_SYNC = "haechi_sync"
    TWO_PHASE_SENDER = "two_phase_sender"
    TWO_PHASE_REFERENCE = "two_phase_reference"
    OPTIMISTIC = "optimistic"

    @property
    def ordered(self) -> bool:
        return self in (ProtocolKind.HAECHI, ProtocolKind.HAECHI_SYNC)

    @property
    def two_phase(self) -> bool:
        return self in (ProtocolKind.TWO_PHASE_SENDER, ProtocolKind.TWO_PHASE_REFERENCE)


@dataclass
class OscWork:
    """A contract execution waiting at the contract shard."""

    tx: Transaction
    local: bool  # processed by this shard itself (sender co-located)


class TwoPhaseShardNode(ShardNode):
    """Vote-then-commit flow: contract state stays locked from execution
    until the coordinator's decision arrives, so conflicting transactions
    serialize on the lock window."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.osc_waitlist: list[OscWork] = []
        self.contract_locks: dict[str, int] = {}
        self.snapshots: dict[int, StateSnapshot] = {}
        self._osc_decisions: list[DecisionNotice] = []

    # -- message routing -----------------------------------------------------

    def route_relay(self, tx: Transaction, now: int) -> None:
        if tx.kind is TxKind.CROSS_SHARD_TRANSFER:
            self.transfer_waitlist.append(tx)
        else:
            self.osc_waitlist.append(OscWork(tx, local=False))

    def route_decision(self, msg: DecisionNotice, now: int) -> None:
        if self.env.tx_by_id(msg.txid).kind is TxKind.CROSS_SHARD_TRANSFER:
            self._transfer_decisions.append(msg)
        else:
            self._osc_decisions.append(msg)

    # -- contract-shard side ---------------------------------------------------

    def apply_osc_decisions(self, now: int) -> None:
        for notice in self._osc_decisions:
            snap = self.snapshots.pop(notice.txid, None)
            if notice.outcome is CommitOutcome.ABORT and snap is not None:
                self.contracts[snap.contract_id] = rollback(snap)
            for cid, owner in list(self.contract_locks.items()):
                if owner == notice.txid:
                    del self.contract_locks[cid]
            self.record_entry(now, notice.txid, notice.outcome, role="contract")
            self.env.mark_terminal(notice.txid, self.shard)
        self._osc_decisions = []

    def drain_osc_executions(self, now: int) -> None:
        remaining: list[OscWork] = []
        blocked: set[str] = set()
        for work in self.osc_waitlist:
            cid = work.tx.contract.contract
            if cid in blocked or self.contract_locks.get(cid) is not None:
                blocked.add(cid)  # keep later conflicting work behind this one
                remaining.append(work)
                continue
            self._execute_osc(work, now)
            if self.contract_locks.get(cid) is not None:
                blocked.add(cid)
        self.osc_waitlist = remaining

    def _execute_osc(self, work: OscWork, now: int) -> None:
        tx = work.tx
        cid = tx.contract.contract
        state = self.contracts.get(cid)
        if state is None:
            self.trace.append(now, EventKind.EXECUTED, tx.txid, self.shard,
                              contract=cid, success=False, note="unknown_contract")
            self._finish_osc(work, False, now)
            return
        snap = take_snapshot(state, tx.txid)
        result = execute_call(state, tx.sender.account, tx.payload)
        self.trace.append(now, EventKind.EXECUTED, tx.txid, self.shard,
                          contract=cid, success=result.success,
                          return_value=result.return_value)
        if result.success and not work.local:
            self.contract_locks[cid] = tx.txid
            self.snapshots[tx.txid] = snap
        self._finish_osc(work, result.success, now)

    def _finish_osc(self, work: OscWork, success: bool, now: int) -> None:
        tx = work.tx
        if work.local:
            # sender and contract co-located: one consensus instance settles it
            if success:
                self.accounts.consume(tx.txid)
                self.record_entry(now, tx.txid, CommitOutcome.COMMIT, role="intra")
            else:
                self.accounts.release(tx.txid)
                self.record_entry(now, tx.txid, CommitOutcome.ABORT, role="intra")
            self.pending_coord.pop(tx.txid, None)
            self.env.mark_terminal(tx.txid, self.shard)
        else:
            self.trace.append(now, EventKind.VOTED, tx.txid, self.shard, commit=success)
            self.send_coordination(tx.sender.shard, VoteMessage(tx.txid, success, self.shard))

    # -- processing ---------------------------------------------------------------

    def process_block(self, now: int) -> None:
        pending: list[Transaction] = []
        for tx in self.eligible_mempool(now):
            if tx.kind is TxKind.CROSS_SHARD_TRANSFER:
                self.process_transfer(tx, now)
                continue
            if not tx.calls_contract:
                self.apply_plain_transfer(tx, now)
                continue
            if not self.accounts.lock(tx.txid, tx.sender.account, tx.coin_cost):
                self.drop_invalid(tx, now, "insufficient_balance")
                continue
            pending.append(tx)
            self.pending_coord[tx.txid] = tx
            self.env.expect_terminals(tx.txid, {self.shard, tx.contract.shard})
            self.trace.append(
                now, EventKind.PROCESSED, tx.txid, self.shard,
                height=self.next_height(), index=len(pending) - 1, block_ts=now,
                contract=tx.contract.contract, contract_shard=tx.contract.shard,
                kind=tx.kind.value,
            )
            if tx.contract.shard == self.shard:
                self.osc_waitlist.append(OscWork(tx, local=True))
            else:
                self.send_relay(tx)
        self.finish_block(now, pending)

    def send_relay(self, tx: Transaction) -> None:
        self.send_coordination(tx.contract.shard, RelayMessage(tx),
                               extra_delay=tx.relay_delay)

    # -- tick -----------------------------------------------------------------------

    def on_tick(self, now: int) -> None:
        if self.halted(now):
            return
        self.forward_routed(now)
        self.apply_osc_decisions(now)
        self.apply_transfer_decisions(now)
        self.coordinator_apply_votes(now)
        self.process_block(now)
        self.serve_transfer_votes(now)
        self.drain_osc_executions(now)
        self.env.schedule_tick(self, now + self.config.block_interval)


class OptimisticShardNode(TwoPhaseShardNode):
    """No lock window: relays execute in arrival order and commit or abort
    immediately on both sides."""

    notify_after_vote = False

    def send_relay(self, tx: Transaction) -> None:
        self.env.send(self.shard, tx.contract.shard, RelayMessage(tx),
                      extra_delay=tx.relay_delay)

    def drain_osc_executions(self, now: int) -> None:
        for work in self.osc_waitlist:
            self._execute_optimistic(work, now)
        self.osc_waitlist = []

    def _execute_optimistic(self, work: OscWork, now: int) -> None:
        tx = work.tx
        cid = tx.contract.contract
        state = self.contracts.get(cid)
        if state is None:
            success = False
            self.trace.append(now, EventKind.EXECUTED, tx.txid, self.shard,
                              contract=cid, success=False, note="unknown_contract")
        else:
            result = execute_call(state, tx.sender.account, tx.payload)
            success = result.success
            self.trace.append(now, EventKind.EXECUTED, tx.txid, self.shard,
                              contract=cid, success=result.success,
                              return_value=result.return_value)
        if work.local:
            self._finish_osc(work, success, now)
            return
        outcome = CommitOutcome.COMMIT if success else CommitOutcome.ABORT
        self.record_entry(now, tx.txid, outcome, role="contract")
        self.env.mark_terminal(tx.txid, self.shard)
        self.trace.append(now, EventKind.VOTED, tx.txid, self.shard, commit=success)
        self.env.send(self.shard, tx.sender.shard, VoteMessage(tx.txid, success, self.shard))
