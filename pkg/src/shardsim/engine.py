"""Per-shard state machines.

The base node owns the pieces every protocol shares: the mempool, the coin
ledger with per-transaction locks, contract states, the block chain, and the
vote/commit machinery used for plain cross-shard coin transfers.  The shard
node for the globally ordered protocol layers the process / execute / commit
phases on top.  Intra-shard consensus is abstracted to "a block finalizes
instantly at each block_interval tick"; all cross-shard interaction flows
through simulated messages.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional, TYPE_CHECKING

from .contracts import (
    ContractState,
    StateSnapshot,
    execute_call,
    rollback,
    take_snapshot,
)
from .model import (
    Block,
    CallListEntry,
    CommitOutcome,
    CoinTransferCall,
    CrossLink,
    EventKind,
    ShardChain,
    Transaction,
    TxKind,
    crosslink_of,
)

if TYPE_CHECKING:  # pragma: no cover
    from .simulator import Simulation


class EngineError(RuntimeError):
    pass


class ProtocolViolationError(EngineError):
    """Contradictory protocol messages for one transaction."""


@dataclass
class ShardConfig:
    shard: int
    block_interval: int
    is_beacon: bool = False
    #: Max transactions admitted from the mempool per block (None = unlimited).
    max_block_txs: Optional[int] = None
    #: Stop producing blocks at this time (fault-injection scenarios).
    halt_at: Optional[int] = None
    #: Block content freezes this many ticks before finalization (the
    #: pre-prepare instant an observing adversary can read).
    proposal_lead: int = 0

    def __post_init__(self) -> None:
        if self.block_interval < 1:
            raise EngineError(f"shard {self.shard}: block_interval must be >= 1")
        self.proposal_lead = max(0, min(self.proposal_lead, self.block_interval - 1))


class AccountState:
    """Coin balances plus per-transaction withheld amounts.

    available + locked always equals the account total; commits consume the
    withheld coins, aborts return them.
    """

    def __init__(self, balances: Optional[dict[str, int]] = None):
        self.balances: dict[str, int] = dict(balances or {})
        self.locks: dict[int, tuple[str, int]] = {}

    def available(self, account: str) -> int:
        return self.balances.get(account, 0)

    def locked_for(self, account: str) -> int:
        return sum(amt for acct, amt in self.locks.values() if acct == account)

    def total(self, account: str) -> int:
        return self.available(account) + self.locked_for(account)

    def lock(self, txid: int, account: str, amount: int) -> bool:
        if amount < 0:
            raise EngineError("negative lock amount")
        if self.balances.get(account, 0) < amount:
            return False
        self.balances[account] = self.balances.get(account, 0) - amount
        self.locks[txid] = (account, amount)
        return True

    def release(self, txid: int) -> None:
        acct, amt = self.locks.pop(txid)
        self.balances[acct] = self.balances.get(acct, 0) + amt

    def consume(self, txid: int) -> None:
        self.locks.pop(txid)

    def credit(self, account: str, amount: int) -> None:
        self.balances[account] = self.balances.get(account, 0) + amount

    def as_dict(self) -> dict:
        return {
            "balances": dict(sorted(self.balances.items())),
            "locks": {str(txid): list(lk) for txid, lk in sorted(self.locks.items())},
        }


# ---------------------------------------------------------------------------
# Execution and commitment records.

class ExecTag(str, Enum):
    FINAL_AND_COMMIT = "final_and_commit"
    FINAL_BUT_ABORT = "final_but_abort"
    PROGRESS_AND_COMMIT = "progress_and_commit"
    PROGRESS_BUT_ABORT = "progress_but_abort"


@dataclass(frozen=True)
class ExecutionMessage:
    txid: int
    tag: ExecTag
    return_value: Optional[int]
    contract_dependency: frozenset[int]
    attestation: str
    origin_shard: int


@dataclass(frozen=True)
class CommitmentDecision:
    txid: int
    decision: CommitOutcome
    notified_shards: frozenset[int]


def decide_commit(messages: list[ExecutionMessage]) -> Optional[CommitOutcome]:
    """Coordinator rule over the execution messages received for one tx.

    Returns None while progress messages are still outstanding.  Raises
    ProtocolViolationError on contradictory messages (one shard reporting two
    different tags, or final and progress tags mixed for one tx).
    """
    if not messages:
        return None
    by_shard: dict[int, ExecutionMessage] = {}
    for msg in messages:
        prev = by_shard.get(msg.origin_shard)
        if prev is not None and prev.tag is not msg.tag:
            raise ProtocolViolationError(
                f"tx {msg.txid}: shard {msg.origin_shard} sent both {prev.tag.value} and {msg.tag.value}"
            )
        by_shard[msg.origin_shard] = msg
    tags = {m.tag for m in by_shard.values()}
    has_final = tags & {ExecTag.FINAL_AND_COMMIT, ExecTag.FINAL_BUT_ABORT}
    has_progress = tags & {ExecTag.PROGRESS_AND_COMMIT, ExecTag.PROGRESS_BUT_ABORT}
    if has_final and has_progress:
        raise ProtocolViolationError(f"tx {messages[0].txid}: final and progress tags mixed")
    if ExecTag.FINAL_BUT_ABORT in tags or ExecTag.PROGRESS_BUT_ABORT in tags:
        return CommitOutcome.ABORT
    if ExecTag.FINAL_AND_COMMIT in tags:
        return CommitOutcome.COMMIT
    dependency = set().union(*(m.contract_dependency for m in by_shard.values()))
    if dependency <= set(by_shard):
        return CommitOutcome.COMMIT
    return None


# ---------------------------------------------------------------------------
# Simulated network messages.

@dataclass(frozen=True)
class ClientSubmission:
    tx: Transaction


@dataclass(frozen=True)
class RelayMessage:
    """Processed cross-shard tx forwarded for execution (vote-phase step)."""

    tx: Transaction


@dataclass(frozen=True)
class VoteMessage:
    txid: int
    commit: bool
    origin_shard: int


@dataclass(frozen=True)
class DecisionNotice:
    txid: int
    outcome: CommitOutcome


@dataclass(frozen=True)
class ExecResultMessage:
    message: ExecutionMessage


@dataclass(frozen=True)
class CrossLinkMessage:
    cl: CrossLink


@dataclass(frozen=True)
class CallListMessage:
    cycle: int
    entries: tuple[tuple[CallListEntry, Transaction], ...]


@dataclass(frozen=True)
class ProceedMessage:
    height: int


@dataclass(frozen=True)
class RoutedMessage:
    """Coordination message travelling via a reference shard."""

    inner: object
    final_dst: int


# ---------------------------------------------------------------------------
# Base shard node.

class ShardNode:
    """State and tick machinery shared by every protocol."""

    def __init__(self, env: "Simulation", config: ShardConfig,
                 balances: dict[str, int], contracts: dict[str, ContractState]):
        self.env = env
        self.config = config
        self.shard = config.shard
        self.accounts = AccountState(balances)
        self.contracts = dict(contracts)
        self.chain = ShardChain(config.shard)
        self.mempool: list[tuple[int, Transaction]] = []
        self.last_tick = 0
        # commitment entries accumulated for the block produced this tick
        self._entries: list[tuple[int, CommitOutcome]] = []
        # coordinator side (sender shard) state
        self.pending_coord: dict[int, Transaction] = {}
        self._votes: list[VoteMessage] = []
        # plain cross-shard transfer recipient state
        self.transfer_waitlist: list[Transaction] = []
        self._transfer_decisions: list[DecisionNotice] = []
        # reference-shard forwarding queue
        self._forward_queue: list[RoutedMessage] = []

    # -- helpers -------------------------------------------------------------

    @property
    def trace(self):
        return self.env.trace

    def next_height(self) -> int:
        return self.chain.height + 1

    def halted(self, now: int) -> bool:
        return self.config.halt_at is not None and now >= self.config.halt_at

    def on_submission(self, tx: Transaction, now: int) -> None:
        self.mempool.append((now, tx))
        recipient_shard = (tx.payload.recipient.shard
                           if isinstance(tx.payload, CoinTransferCall) else None)
        self.trace.append(
            now, EventKind.SUBMITTED, tx.txid, self.shard,
            kind=tx.kind.value,
            submit_time=tx.submit_time,
            sender=tx.sender.account,
            contract=tx.contract.contract if tx.contract else None,
            contract_shard=tx.contract.shard if tx.contract else None,
            recipient_shard=recipient_shard,
        )
        self.env.tx_submitted(tx.txid)

    def eligible_mempool(self, now: int) -> list[Transaction]:
        """Transactions frozen into the block finalizing at ``now``.

        Content is fixed at the proposal instant (now - proposal_lead); later
        arrivals wait for the next block.  Capacity counts admitted txs only.
        """
        cutoff = now - self.config.proposal_lead
        taken: list[Transaction] = []
        rest: list[tuple[int, Transaction]] = []
        cap = self.config.max_block_txs
        for arrival, tx in self.mempool:
            if arrival < cutoff and (cap is None or len(taken) < cap):
                taken.append(tx)
            else:
                rest.append((arrival, tx))
        self.mempool = rest
        return taken

    def proposal_preview(self, tick_time: int) -> list[Transaction]:
        """Block content an observer sees at the pre-prepare instant."""
        cutoff = tick_time - self.config.proposal_lead
        cap = self.config.max_block_txs
        out: list[Transaction] = []
        for arrival, tx in self.mempool:
            if arrival < cutoff and (cap is None or len(out) < cap):
                out.append(tx)
        return out

    def record_entry(self, now: int, txid: int, outcome: CommitOutcome, **detail) -> None:
        self._entries.append((txid, outcome))
        kind = EventKind.COMMITTED if outcome is CommitOutcome.COMMIT else EventKind.ABORTED
        self.trace.append(now, kind, txid, self.shard, height=self.next_height(), **detail)

    def drop_invalid(self, tx: Transaction, now: int, reason: str) -> None:
        self.trace.append(now, EventKind.ABORTED, tx.txid, self.shard, reason=reason)
        self.env.expect_terminals(tx.txid, {self.shard})
        self.env.mark_terminal(tx.txid, self.shard)

    def finish_block(self, now: int, pending: list[Transaction]) -> Block:
        block = Block(
            shard=self.shard,
            height=self.next_height(),
            block_ts=now,
            pending=tuple(pending),
            committing=tuple(self._entries),
        )
        self.chain.append(block)
        self._entries = []
        self.last_tick = now
        return block

    def ledger_dump(self) -> dict:
        return {
            "shard": self.shard,
            "accounts": self.accounts.as_dict(),
            "contracts": {cid: st.as_dict() for cid, st in sorted(self.contracts.items())},
            "height": self.chain.height,
            "committed": [[txid, oc.value] for txid, oc in self.chain.committed_sequence()],
        }

    # -- message handling ------------------------------------------------------

    def on_message(self, msg: object, now: int) -> None:
        if isinstance(msg, ClientSubmission):
            self.on_submission(msg.tx, now)
        elif isinstance(msg, RelayMessage):
            self.route_relay(msg.tx, now)
        elif isinstance(msg, VoteMessage):
            self._votes.append(msg)
        elif isinstance(msg, DecisionNotice):
            self.route_decision(msg, now)
        elif isinstance(msg, RoutedMessage):
            self._forward_queue.append(msg)
        else:
            raise EngineError(f"shard {self.shard}: unexpected message {type(msg).__name__}")

    def route_relay(self, tx: Transaction, now: int) -> None:
        if tx.kind is not TxKind.CROSS_SHARD_TRANSFER:
            raise EngineError(f"shard {self.shard}: unexpected contract relay for tx {tx.txid}")
        self.transfer_waitlist.append(tx)

    def route_decision(self, msg: DecisionNotice, now: int) -> None:
        if self.env.tx_by_id(msg.txid).kind is not TxKind.CROSS_SHARD_TRANSFER:
            raise EngineError(f"shard {self.shard}: unexpected contract decision for tx {msg.txid}")
        self._transfer_decisions.append(msg)

    # -- coordinator (sender shard) vote handling -------------------------------

    notify_after_vote = True

    def coordinator_apply_votes(self, now: int) -> None:
        for vote in self._votes:
            tx = self.pending_coord.pop(vote.txid)
            outcome = CommitOutcome.COMMIT if vote.commit else CommitOutcome.ABORT
            if vote.commit:
                self.accounts.consume(tx.txid)
            else:
                self.accounts.release(tx.txid)
            self.record_entry(now, tx.txid, outcome, role="sender")
            self.env.mark_terminal(tx.txid, self.shard)
            if self.notify_after_vote or tx.kind is TxKind.CROSS_SHARD_TRANSFER:
                self.send_coordination(vote.origin_shard, DecisionNotice(tx.txid, outcome))
        self._votes = []

    def send_coordination(self, dst: int, msg: object, extra_delay: int = 0) -> None:
        """Send a coordination message, via the reference shard when one is
        configured for this protocol."""
        via = self.env.reference_shard
        if via is not None and via != self.shard and via != dst:
            self.env.send(self.shard, via, RoutedMessage(msg, dst), extra_delay=extra_delay)
        else:
            self.env.send(self.shard, dst, msg, extra_delay=extra_delay)

    def forward_routed(self, now: int) -> None:
        for routed in self._forward_queue:
            self.env.send(self.shard, routed.final_dst, routed.inner)
        self._forward_queue = []

    # -- plain cross-shard transfers ---------------------------------------------

    def process_transfer(self, tx: Transaction, now: int) -> None:
        assert isinstance(tx.payload, CoinTransferCall)
        if not self.accounts.lock(tx.txid, tx.sender.account, tx.coin_cost):
            self.drop_invalid(tx, now, "insufficient_balance")
            return
        self.pending_coord[tx.txid] = tx
        self.env.expect_terminals(tx.txid, {self.shard, tx.payload.recipient.shard})
        self.env.send(self.shard, tx.payload.recipient.shard, RelayMessage(tx),
                      extra_delay=tx.relay_delay)

    def serve_transfer_votes(self, now: int) -> None:
        for tx in self.transfer_waitlist:
            self.trace.append(now, EventKind.VOTED, tx.txid, self.shard, commit=True)
            self.env.send(self.shard, tx.sender.shard, VoteMessage(tx.txid, True, self.shard))
        self.transfer_waitlist = []

    def apply_transfer_decisions(self, now: int) -> None:
        for notice in self._transfer_decisions:
            tx = self.env.tx_by_id(notice.txid)
            if notice.outcome is CommitOutcome.COMMIT and isinstance(tx.payload, CoinTransferCall):
                self.accounts.credit(tx.payload.recipient.account, tx.payload.amount)
            self.record_entry(now, notice.txid, notice.outcome, role="recipient")
            self.env.mark_terminal(notice.txid, self.shard)
        self._transfer_decisions = []

    def apply_plain_transfer(self, tx: Transaction, now: int) -> None:
        """Intra-shard coin transfer: committed within one block."""
        assert isinstance(tx.payload, CoinTransferCall)
        if self.accounts.available(tx.sender.account) < tx.payload.amount:
            self.drop_invalid(tx, now, "insufficient_balance")
            return
        self.accounts.credit(tx.sender.account, -tx.payload.amount)
        self.accounts.credit(tx.payload.recipient.account, tx.payload.amount)
        self.env.expect_terminals(tx.txid, {self.shard})
        self.record_entry(now, tx.txid, CommitOutcome.COMMIT, role="intra")
        self.env.mark_terminal(tx.txid, self.shard)

    # -- tick ---------------------------------------------------------------------

    def on_tick(self, now: int) -> None:
        raise NotImplementedError


# ---------------------------------------------------------------------------
# Shard node for the ordered protocol: process / order / execute / commit.

class HaechiShardNode(ShardNode):
    sync_mode = False

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.exec_queue: deque[tuple[CallListEntry, Transaction]] = deque()
        self.progress_locks: dict[str, int] = {}
        self.snapshots: dict[int, list[StateSnapshot]] = {}
        self.executed_local: set[int] = set()
        self.remote_aborted: set[int] = set()
        self.exec_inbox: dict[int, list[ExecutionMessage]] = {}
        self._commit_notices: list[DecisionNotice] = []
        # height whose ordering must complete before the next block may be
        # proposed (sync strawman only; None when free-running)
        self.awaiting_proceed: Optional[int] = None

    def on_message(self, msg: object, now: int) -> None:
        if isinstance(msg, CallListMessage):
            self.exec_queue.extend(msg.entries)
        elif isinstance(msg, ExecResultMessage):
            self.exec_inbox.setdefault(msg.message.txid, []).append(msg.message)
        elif isinstance(msg, ProceedMessage):
            self.on_proceed(msg, now)
        else:
            super().on_message(msg, now)

    def route_decision(self, msg: DecisionNotice, now: int) -> None:
        if self.env.tx_by_id(msg.txid).kind is TxKind.CROSS_SHARD_TRANSFER:
            self._transfer_decisions.append(msg)
        else:
            self._commit_notices.append(msg)

    def on_proceed(self, msg: ProceedMessage, now: int) -> None:
        if self.awaiting_proceed is not None and msg.height >= self.awaiting_proceed:
            self.awaiting_proceed = None
            self.env.schedule_tick(self, max(now, self.last_tick + self.config.block_interval))

    # -- commitment phase --------------------------------------------------------

    def apply_commit_notices(self, now: int) -> None:
        for notice in self._commit_notices:
            self._apply_contract_side(notice.txid, notice.outcome, now, record=True)
        self._commit_notices = []

    def _apply_contract_side(self, txid: int, outcome: CommitOutcome, now: int, record: bool) -> None:
        snaps = self.snapshots.pop(txid, [])
        if outcome is CommitOutcome.ABORT:
            for snap in reversed(snaps):
                self.contracts[snap.contract_id] = rollback(snap)
            if txid not in self.executed_local:
                # decided abort before the local execution ran: cancel it
                self.remote_aborted.add(txid)
        for cid, owner in list(self.progress_locks.items()):
            if owner == txid:
                del self.progress_locks[cid]
        if record:
            self.record_entry(now, txid, outcome, role="contract")
        self.env.mark_terminal(txid, self.shard)

    def coordinate_decisions(self, now: int) -> None:
        for txid in list(self.exec_inbox):
            messages = self.exec_inbox[txid]
            outcome = decide_commit(messages)
            if outcome is None:
                continue
            del self.exec_inbox[txid]
            tx = self.pending_coord.pop(txid)
            involved = set(tx.involved_contract_shards())
            if outcome is CommitOutcome.COMMIT:
                self.accounts.consume(txid)
            else:
                self.accounts.release(txid)
            self.record_entry(now, txid, outcome, role="sender")
            self.env.mark_terminal(txid, self.shard)
            for shard in sorted(involved):
                if shard == self.shard:
                    self._apply_contract_side(txid, outcome, now, record=False)
                else:
                    self.env.send(self.shard, shard, DecisionNotice(txid, outcome))
            self.env.record_decision(CommitmentDecision(txid, outcome, frozenset(involved)))

    # -- processing phase ----------------------------------------------------------

    def process_block(self, now: int) -> tuple[Block, CrossLink]:
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
            self.env.expect_terminals(
                tx.txid, {self.shard} | set(tx.involved_contract_shards())
            )
            self.trace.append(
                now, EventKind.PROCESSED, tx.txid, self.shard,
                height=self.next_height(), index=len(pending) - 1, block_ts=now,
                contract=tx.contract.contract, contract_shard=tx.contract.shard,
                kind=tx.kind.value,
            )
        block = self.finish_block(now, pending)
        cl = crosslink_of(block)
        self.trace.append(
            now, EventKind.CROSSLINK_SENT, cl.cl_id, self.shard,
            shard=cl.shard, height=cl.height, block_ts=cl.block_ts,
            txids=[tx.txid for tx in cl.txs],
        )
        return block, cl

    # -- execution phase -------------------------------------------------------------

    def _local_parts(self, tx: Transaction) -> list[tuple[str, object]]:
        parts: list[tuple[str, object]] = []
        if tx.contract is not None and tx.contract.shard == self.shard:
            parts.append((tx.contract.contract, tx.payload))
        for sub in tx.sub_calls:
            if sub.contract.shard == self.shard:
                parts.append((sub.contract.contract, sub.call))
        return parts

    def execute_ccl(self, entries: tuple[tuple[CallListEntry, Transaction], ...], now: int) -> list[ExecutionMessage]:
        """Execute call-list entries strictly in list order.

        The head of the queue waits while its contract is held by an earlier
        multi-shard tx whose commitment is still pending; everything behind it
        waits too, so the per-shard execution order always equals the call
        list order.
        """
        self.exec_queue.extend(entries)
        out: list[ExecutionMessage] = []
        while self.exec_queue:
            entry, tx = self.exec_queue[0]
            if tx.txid in self.remote_aborted:
                self.remote_aborted.discard(tx.txid)
                self.exec_queue.popleft()
                continue
            parts = self._local_parts(tx)
            if any(self.progress_locks.get(cid, tx.txid) != tx.txid for cid, _ in parts):
                break
            self.exec_queue.popleft()
            out.append(self._execute_parts(tx, parts, now))
        for msg in out:
            self.env.send(self.shard, self.env.tx_by_id(msg.txid).sender.shard,
                          ExecResultMessage(msg))
        return out

    def _execute_parts(self, tx: Transaction, parts: list[tuple[str, object]], now: int) -> ExecutionMessage:
        multi = tx.is_multi_shard
        dependency = frozenset(tx.involved_contract_shards()) if multi else frozenset({self.shard})
        self.executed_local.add(tx.txid)
        snaps: list[StateSnapshot] = []
        ok = True
        ret: Optional[int] = None
        for cid, call in parts:
            state = self.contracts.get(cid)
            if state is None:
                self.trace.append(now, EventKind.EXECUTED, tx.txid, self.shard,
                                  contract=cid, success=False, note="unknown_contract")
                ok = False
                break
            snap = take_snapshot(state, tx.txid)
            result = execute_call(state, tx.sender.account, call)
            self.trace.append(
                now, EventKind.EXECUTED, tx.txid, self.shard,
                contract=cid, success=result.success,
                return_value=result.return_value,
            )
            if not result.success:
                ok = False
                break
            snaps.append(snap)
            if tx.contract is not None and cid == tx.contract.contract:
                ret = result.return_value
        if not ok:
            for snap in reversed(snaps):
                self.contracts[snap.contract_id] = rollback(snap)
            tag = ExecTag.PROGRESS_BUT_ABORT if multi else ExecTag.FINAL_BUT_ABORT
        elif multi:
            # hold the touched contracts until the commitment decision; a
            # rollback after later executions built on the state would be
            # unsound otherwise
            self.snapshots[tx.txid] = snaps
            for cid, _ in parts:
                self.progress_locks[cid] = tx.txid
            tag = ExecTag.PROGRESS_AND_COMMIT
        else:
            # a single-contract success always commits, so the change is final
            tag = ExecTag.FINAL_AND_COMMIT
        msg = ExecutionMessage(
            txid=tx.txid, tag=tag, return_value=ret,
            contract_dependency=dependency,
            attestation=f"exec:{self.shard}:{tx.txid}",
            origin_shard=self.shard,
        )
        self.trace.append(now, EventKind.VOTED, tx.txid, self.shard,
                          tag=tag.value, dependency=sorted(dependency))
        return msg

    # -- tick -------------------------------------------------------------------------

    def on_tick(self, now: int) -> None:
        if self.halted(now) or self.awaiting_proceed is not None:
            return
        self.apply_commit_notices(now)
        self.apply_transfer_decisions(now)
        self.coordinator_apply_votes(now)
        self.coordinate_decisions(now)
        _, cl = self.process_block(now)
        self.serve_transfer_votes(now)
        self.env.send(self.shard, 0, CrossLinkMessage(cl))
        self.execute_ccl((), now)
        if self.sync_mode:
            self.awaiting_proceed = self.chain.height
        else:
            self.env.schedule_tick(self, now + self.config.block_interval)


class HaechiSyncShardNode(HaechiShardNode):
    """Strawman: block h+1 waits until the beacon has ordered height h."""

    sync_mode = True
