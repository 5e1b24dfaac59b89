"""Beacon-chain ordering: the fair global-ordering algorithm and the
analytic gas-overhead estimator.

The orderer holds per-shard runs of consecutive-height CrossLinks, stashes
out-of-order arrivals in a pool, and fires an ordering cycle only once every
shard has contributed at least one consecutive CrossLink.  A cycle selects
all held CrossLinks whose block timestamp is at most the minimum of the
per-shard latest consecutive timestamps, then merges their transactions into
per-contract-shard call lists.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .model import (
    BEACON_SHARD,
    CallListEntry,
    CrossLink,
    CrossShardCallLists,
    Transaction,
)


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class OrderKey:
    """Total order over transactions within and across ordering cycles.

    Lexicographic on (block timestamp, shard id, height, index in CrossLink).
    The (shard, height) tie-break is only exercised when two CrossLinks from
    different shards carry equal timestamps; within one CrossLink the index
    preserves pending-list order.
    """

    block_ts: int
    shard: int
    height: int
    index: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.block_ts, self.shard, self.height, self.index)

    def __lt__(self, other: "OrderKey") -> bool:
        return self.as_tuple() < other.as_tuple()


class BeaconOrderer:
    """State of the ordering phase for one run.

    ``note`` is an optional callback (message: str, **detail) used to surface
    duplicate/stale CrossLinks to the trace without coupling this module to
    the simulator.
    """

    def __init__(self, shard_ids: list[int], note=None):
        if BEACON_SHARD in shard_ids:
            raise OrderingError("beacon shard cannot feed its own orderer")
        if not shard_ids:
            raise OrderingError("at least one shard required")
        self.shard_ids = sorted(shard_ids)
        self.shard_cls: dict[int, deque[CrossLink]] = {i: deque() for i in self.shard_ids}
        self.cl_pool: dict[tuple[int, int], CrossLink] = {}
        self.shard_last_ts: dict[int, int] = {i: 0 for i in self.shard_ids}
        self.last_ordered_height: dict[int, int] = {i: 0 for i in self.shard_ids}
        self.first_ts_map: dict[int, int] = {}
        self.ordered_txids: set[int] = set()
        self.cycle_count = 0
        self._seen: set[tuple[int, int]] = set()
        self._note = note or (lambda msg, **kw: None)

    # -- receive path -------------------------------------------------------

    def has_seen(self, shard: int, height: int) -> bool:
        return (shard, height) in self._seen

    def _rear_height(self, shard: int) -> int:
        dq = self.shard_cls[shard]
        return dq[-1].height if dq else self.last_ordered_height[shard]

    def _absorb(self, cl: CrossLink) -> None:
        self.shard_cls[cl.shard].append(cl)
        self.shard_last_ts[cl.shard] = cl.block_ts
        for tx in cl.txs:
            if tx.is_multi_shard and tx.txid not in self.first_ts_map:
                self.first_ts_map[tx.txid] = cl.block_ts

    def on_crosslink(self, cl: CrossLink) -> None:
        if cl.shard not in self.shard_cls:
            raise OrderingError(f"CrossLink from unknown shard {cl.shard}")
        key = (cl.shard, cl.height)
        if key in self._seen:
            self._note("duplicate crosslink ignored", shard=cl.shard, height=cl.height)
            return
        if cl.height <= self.last_ordered_height[cl.shard]:
            self._note("stale crosslink ignored", shard=cl.shard, height=cl.height)
            return
        self._seen.add(key)
        rear = self._rear_height(cl.shard)
        if cl.height == rear + 1:
            self._absorb(cl)
            # drain any now-consecutive successors waiting in the pool
            while (cl.shard, self._rear_height(cl.shard) + 1) in self.cl_pool:
                nxt = self.cl_pool.pop((cl.shard, self._rear_height(cl.shard) + 1))
                self._absorb(nxt)
        elif cl.height > rear + 1:
            self.cl_pool[key] = cl
        else:
            self._note("duplicate crosslink ignored", shard=cl.shard, height=cl.height)

    # -- ordering cycle ------------------------------------------------------

    def try_order_cycle(self) -> Optional[CrossShardCallLists]:
        """Fire one ordering cycle if the at-least-one rule is met.

        Returns None when some shard has no held consecutive CrossLink.
        """
        if any(not self.shard_cls[i] for i in self.shard_ids):
            return None
        end_ts = min(self.shard_last_ts[i] for i in self.shard_ids)

        selected: list[CrossLink] = []
        for shard in self.shard_ids:
            dq = self.shard_cls[shard]
            while dq and dq[0].block_ts <= end_ts:
                cl = dq.popleft()
                selected.append(cl)
                self.last_ordered_height[shard] = cl.height

        keyed: list[tuple[OrderKey, Transaction, CrossLink]] = []
        for cl in selected:
            for idx, tx in enumerate(cl.txs):
                ts = cl.block_ts
                if tx.is_multi_shard:
                    ts = self.first_ts_map.get(tx.txid, cl.block_ts)
                keyed.append((OrderKey(ts, cl.shard, cl.height, idx), tx, cl))
        keyed.sort(key=lambda item: item[0].as_tuple())

        order: list[int] = []
        lists: dict[int, list[CallListEntry]] = {}
        for okey, tx, cl in keyed:
            if tx.txid in self.ordered_txids:
                self._note("tx already ordered, skipped", txid=tx.txid)
                continue
            self.ordered_txids.add(tx.txid)
            order.append(tx.txid)
            entry = CallListEntry(
                txid=tx.txid,
                source_shard=cl.shard,
                source_height=cl.height,
                index=okey.index,
                order_ts=okey.block_ts,
            )
            for target in tx.involved_contract_shards():
                lists.setdefault(target, []).append(entry)

        self.cycle_count += 1
        return CrossShardCallLists(
            cycle=self.cycle_count,
            end_ts=end_ts,
            lists={shard: tuple(entries) for shard, entries in sorted(lists.items())},
            order=tuple(order),
            selected=tuple(selected),
        )


class SyncOrderer:
    """Strawman variant: one cycle per block height, consuming exactly one
    CrossLink per shard once the full height has arrived."""

    def __init__(self, shard_ids: list[int], note=None):
        self.shard_ids = sorted(shard_ids)
        self.by_height: dict[int, dict[int, CrossLink]] = {}
        self.next_height = 1
        self.ordered_txids: set[int] = set()
        self.cycle_count = 0
        self._note = note or (lambda msg, **kw: None)

    def has_seen(self, shard: int, height: int) -> bool:
        if height < self.next_height:
            return True
        return shard in self.by_height.get(height, {})

    def on_crosslink(self, cl: CrossLink) -> None:
        slot = self.by_height.setdefault(cl.height, {})
        if cl.shard in slot:
            self._note("duplicate crosslink ignored", shard=cl.shard, height=cl.height)
            return
        slot[cl.shard] = cl

    def try_order_cycle(self) -> Optional[CrossShardCallLists]:
        slot = self.by_height.get(self.next_height)
        if not slot or len(slot) < len(self.shard_ids):
            return None
        height = self.next_height
        selected = [slot[s] for s in self.shard_ids]
        del self.by_height[height]
        self.next_height += 1

        keyed = []
        for cl in selected:
            for idx, tx in enumerate(cl.txs):
                keyed.append((OrderKey(cl.block_ts, cl.shard, cl.height, idx), tx, cl))
        keyed.sort(key=lambda item: item[0].as_tuple())

        order: list[int] = []
        lists: dict[int, list[CallListEntry]] = {}
        for okey, tx, cl in keyed:
            if tx.txid in self.ordered_txids:
                continue
            self.ordered_txids.add(tx.txid)
            order.append(tx.txid)
            entry = CallListEntry(tx.txid, cl.shard, cl.height, okey.index, okey.block_ts)
            for target in tx.involved_contract_shards():
                lists.setdefault(target, []).append(entry)

        self.cycle_count += 1
        end_ts = max(cl.block_ts for cl in selected)
        return CrossShardCallLists(
            cycle=self.cycle_count,
            end_ts=end_ts,
            lists={shard: tuple(entries) for shard, entries in sorted(lists.items())},
            order=tuple(order),
            selected=tuple(selected),
        )


# ---------------------------------------------------------------------------
# Analytic gas overhead of the ordering phase.

#: Measured cost of one timestamp comparison in the ordering contract.
GAS_PER_COMPARISON = 780


class GasCase(str, Enum):
    MAX = "max"
    AVG = "avg"
    MIN = "min"


def estimate_ordering_gas(n_crosslinks: int, txs_per_crosslink: int, case: GasCase) -> int:
    """Per-transaction gas overhead of sorting ``n_crosslinks`` CrossLinks.

    Comparison counts follow the sorting complexity for each case: n^2 (MAX),
    n*log2(n) (AVG, floored at one comparison), n (MIN).  MAX and MIN are
    bounds and round up; AVG rounds down.
    """
    if n_crosslinks < 1 or txs_per_crosslink < 1:
        raise OrderingError("n_crosslinks and txs_per_crosslink must be >= 1")
    n = n_crosslinks
    if case is GasCase.MAX:
        comparisons: float = n * n
    elif case is GasCase.MIN:
        comparisons = n
    elif case is GasCase.AVG:
        comparisons = max(1.0, n * math.log2(n)) if n > 1 else 1.0
    else:
        raise OrderingError(f"unknown gas case {case!r}")
    per_tx = comparisons * GAS_PER_COMPARISON / (n * txs_per_crosslink)
    if case is GasCase.AVG:
        return math.floor(per_tx)
    return math.ceil(per_tx)


def gas_table(n_crosslinks: int, txs_per_crosslink: int) -> dict[str, int]:
    return {
        case.value: estimate_ordering_gas(n_crosslinks, txs_per_crosslink, case)
        for case in (GasCase.MAX, GasCase.AVG, GasCase.MIN)
    }
