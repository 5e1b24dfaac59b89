"""Shared domain types for the sharded-ledger simulator.

Everything here is value data used by every protocol: transactions, blocks,
cross-link messages, per-cycle call lists, and the append-only event trace.
Simulation time is integer ticks; there is no wall clock anywhere, which is
what makes exact replay possible.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Iterator, Optional, Union

#: Shard id reserved for the beacon chain.  It hosts no accounts or contracts.
BEACON_SHARD = 0


class ConfigurationError(ValueError):
    """Invalid identifiers or malformed scenario input."""


class TxKind(str, Enum):
    INTRA_SHARD = "intra_shard"
    CROSS_SHARD_TRANSFER = "cross_shard_transfer"
    OSC = "osc"


class CommitOutcome(str, Enum):
    COMMIT = "commit"
    ABORT = "abort"


@dataclass(frozen=True)
class AccountRef:
    account: str
    shard: int


@dataclass(frozen=True)
class ContractRef:
    contract: str
    shard: int


# ---------------------------------------------------------------------------
# Call payloads.  Contract-call arguments are plain data; execution semantics
# live in shardsim.contracts.

@dataclass(frozen=True)
class SwapCall:
    """Buy tokens from a constant-product exchange with ``coins_in`` coins."""

    coins_in: int

    def as_dict(self) -> dict:
        return {"kind": "swap", "coins_in": self.coins_in}


@dataclass(frozen=True)
class TokenTransferCall:
    """Move ``amount`` ledger tokens from the tx sender to ``recipient``."""

    recipient: str
    amount: int

    def as_dict(self) -> dict:
        return {"kind": "token_transfer", "recipient": self.recipient, "amount": self.amount}


@dataclass(frozen=True)
class CoinTransferCall:
    """Plain coin transfer between accounts (no contract involved)."""

    recipient: AccountRef
    amount: int

    def as_dict(self) -> dict:
        return {
            "kind": "coin_transfer",
            "recipient": self.recipient.account,
            "recipient_shard": self.recipient.shard,
            "amount": self.amount,
        }


ContractCall = Union[SwapCall, TokenTransferCall]
Payload = Union[SwapCall, TokenTransferCall, CoinTransferCall]


@dataclass(frozen=True)
class SubCall:
    """A dependent contract call declared statically on the transaction."""

    contract: ContractRef
    call: ContractCall

    def as_dict(self) -> dict:
        return {
            "contract": self.contract.contract,
            "shard": self.contract.shard,
            "call": self.call.as_dict(),
        }


@dataclass(frozen=True)
class Transaction:
    txid: int
    kind: TxKind
    sender: AccountRef
    contract: Optional[ContractRef]
    payload: Optional[Payload]
    submit_time: int
    sub_calls: tuple[SubCall, ...] = ()
    #: Extra network delay applied to this tx's relay message (2P/optimistic
    #: protocols only).  Lets scenarios script adverse arrival schedules.
    relay_delay: int = 0

    @property
    def calls_contract(self) -> bool:
        return self.contract is not None

    @property
    def coin_cost(self) -> int:
        """Coins withheld from the sender when the tx is processed."""
        if isinstance(self.payload, SwapCall):
            return self.payload.coins_in
        if isinstance(self.payload, CoinTransferCall):
            return self.payload.amount
        return 0

    @property
    def is_multi_shard(self) -> bool:
        return bool(self.sub_calls)

    def involved_contract_shards(self) -> tuple[int, ...]:
        """Shards that execute part of this tx, entry contract first."""
        shards: list[int] = []
        if self.contract is not None:
            shards.append(self.contract.shard)
        for sub in self.sub_calls:
            if sub.contract.shard not in shards:
                shards.append(sub.contract.shard)
        return tuple(shards)

    def payload_dict(self) -> Optional[dict]:
        return self.payload.as_dict() if self.payload is not None else None


class TransactionFactory:
    """Creates transactions with fresh, monotonically assigned integer ids."""

    def __init__(self, shard_ids: Iterable[int]):
        self._shards = set(shard_ids)
        self._next = 1
        self._used: set[int] = set()

    def new_transaction(
        self,
        kind: TxKind,
        sender: AccountRef,
        contract: Optional[ContractRef],
        payload: Optional[Payload],
        submit_time: int,
        sub_calls: tuple[SubCall, ...] = (),
        txid: Optional[int] = None,
        relay_delay: int = 0,
    ) -> Transaction:
        if sender.shard not in self._shards or sender.shard == BEACON_SHARD:
            raise ConfigurationError(f"unknown sender shard {sender.shard!r}")
        if contract is not None and (contract.shard not in self._shards or contract.shard == BEACON_SHARD):
            raise ConfigurationError(f"unknown contract shard {contract.shard!r}")
        if isinstance(payload, CoinTransferCall):
            if payload.recipient.shard not in self._shards or payload.recipient.shard == BEACON_SHARD:
                raise ConfigurationError(f"unknown recipient shard {payload.recipient.shard!r}")
        if txid is None:
            while self._next in self._used:
                self._next += 1
            txid = self._next
            self._next += 1
        elif txid in self._used:
            raise ConfigurationError(f"duplicate txid {txid}")
        self._used.add(txid)
        return Transaction(
            txid=txid,
            kind=kind,
            sender=sender,
            contract=contract,
            payload=payload,
            submit_time=submit_time,
            sub_calls=sub_calls,
            relay_delay=relay_delay,
        )


# ---------------------------------------------------------------------------
# Blocks and chains.

@dataclass(frozen=True)
class Block:
    shard: int
    height: int
    block_ts: int
    pending: tuple[Transaction, ...]
    committing: tuple[tuple[int, CommitOutcome], ...]


class ChainError(ValueError):
    """Block insertion violating height/timestamp monotonicity."""


class ShardChain:
    """Per-shard block sequence; enforces consecutive heights and strictly
    increasing block timestamps."""

    def __init__(self, shard: int):
        self.shard = shard
        self.blocks: list[Block] = []

    def __len__(self) -> int:
        return len(self.blocks)

    @property
    def height(self) -> int:
        return len(self.blocks)

    @property
    def last_ts(self) -> int:
        return self.blocks[-1].block_ts if self.blocks else 0

    def append(self, block: Block) -> None:
        if block.shard != self.shard:
            raise ChainError(f"block for shard {block.shard} appended to chain {self.shard}")
        if block.height != self.height + 1:
            raise ChainError(f"expected height {self.height + 1}, got {block.height}")
        if self.blocks and block.block_ts <= self.last_ts:
            raise ChainError(
                f"block_ts {block.block_ts} not greater than previous {self.last_ts}"
            )
        seen = {txid for b in self.blocks for txid, _ in b.committing}
        for txid, _ in block.committing:
            if txid in seen:
                raise ChainError(f"txid {txid} already in a committing list of shard {self.shard}")
        self.blocks.append(block)

    def committed_sequence(self) -> list[tuple[int, CommitOutcome]]:
        return [entry for b in self.blocks for entry in b.committing]


# ---------------------------------------------------------------------------
# CrossLinks and per-cycle call lists.

@dataclass(frozen=True)
class CrossLink:
    block_ts: int
    txs: tuple[Transaction, ...]
    shard: int
    height: int
    attestation: str

    @property
    def cl_id(self) -> str:
        return f"CL:{self.shard}:{self.height}"


def crosslink_of(block: Block) -> CrossLink:
    """Project a finalized block into its CrossLink.

    Carries exactly the contract-calling transactions of the pending list in
    list order.  Empty blocks still yield (empty) CrossLinks so that the
    beacon sees every height.
    """
    txs = tuple(tx for tx in block.pending if tx.calls_contract)
    return CrossLink(
        block_ts=block.block_ts,
        txs=txs,
        shard=block.shard,
        height=block.height,
        attestation=f"qc:{block.shard}:{block.height}",
    )


@dataclass(frozen=True)
class CallListEntry:
    txid: int
    source_shard: int
    source_height: int
    index: int
    order_ts: int


@dataclass(frozen=True)
class CrossShardCallLists:
    """Output of one ordering cycle: per-contract-shard ordered call lists."""

    cycle: int
    end_ts: int
    lists: dict[int, tuple[CallListEntry, ...]]
    order: tuple[int, ...]
    selected: tuple[CrossLink, ...]


# ---------------------------------------------------------------------------
# Event trace.

class EventKind(str, Enum):
    SUBMITTED = "Submitted"
    PROCESSED = "Processed"
    CROSSLINK_SENT = "CrossLinkSent"
    CROSSLINK_RECEIVED = "CrossLinkReceived"
    ORDERED = "Ordered"
    EXECUTED = "Executed"
    VOTED = "Voted"
    COMMITTED = "Committed"
    ABORTED = "Aborted"
    ADVERSARY_OBSERVED = "AdversaryObserved"
    ADVERSARY_INJECTED = "AdversaryInjected"


@dataclass(frozen=True, slots=True)
class TraceEvent:
    time: int
    seq: int
    kind: str
    subject: Union[int, str]
    location: int
    detail: dict

    def as_dict(self) -> dict:
        return {
            "time": self.time,
            "seq": self.seq,
            "kind": self.kind,
            "subject": self.subject,
            "location": self.location,
            "detail": self.detail,
        }


class Trace:
    """Append-only event log, totally ordered by (time, seq)."""

    def __init__(self) -> None:
        self.events: list[TraceEvent] = []
        self._seq = 0

    def append(self, time: int, kind: EventKind, subject: Union[int, str], location: int, **detail: Any) -> TraceEvent:
        ev = TraceEvent(time, self._seq, kind.value, subject, location, detail)
        self._seq += 1
        self.events.append(ev)
        return ev

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def to_jsonl(self) -> str:
        return "".join(
            json.dumps(ev.as_dict(), sort_keys=True, separators=(",", ":")) + "\n"
            for ev in self.events
        )

    def write_jsonl(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @staticmethod
    def parse_jsonl(text: str) -> list[TraceEvent]:
        events = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                events.append(
                    TraceEvent(
                        time=rec["time"],
                        seq=rec["seq"],
                        kind=rec["kind"],
                        subject=rec["subject"],
                        location=rec["location"],
                        detail=rec["detail"],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ConfigurationError(f"corrupt trace at line {lineno}: {exc}") from exc
        return events

    @staticmethod
    def read_jsonl(path: str) -> list[TraceEvent]:
        with open(path) as fh:
            return Trace.parse_jsonl(fh.read())
