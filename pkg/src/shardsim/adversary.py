"""Front-running adversary models.

The adversary reads block proposals of observed shards at the pre-prepare
instant and reacts with its own transaction against the same contract:
either an intra-shard call from an account co-located with the contract, or
a cross-shard call from an account on a designated (fast) shard.  Outcomes
are judged purely from the execution trace: an attack front-ran its victim
iff the attack's execution event at the target contract precedes the
victim's.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, TYPE_CHECKING

from .model import (
    AccountRef,
    ContractRef,
    EventKind,
    SwapCall,
    TraceEvent,
    Transaction,
    TxKind,
)
from .scenario import AdversaryModel, AdversarySpec

if TYPE_CHECKING:  # pragma: no cover
    from .simulator import Simulation


class AttackOutcome(str, Enum):
    FRONT_RAN = "front_ran"
    FAILED = "failed"


@dataclass
class AttackRecord:
    victim_txid: int
    attack_txid: int
    contract: str
    observed_at: int
    injected_at: int
    outcome: Optional[AttackOutcome] = None


@dataclass(frozen=True)
class PlannedInjection:
    send_time: int
    observer_shard: int
    target_shard: int
    tx: Transaction
    victim_txid: int


class Adversary:
    def __init__(self, env: "Simulation", spec: AdversarySpec):
        self.env = env
        self.spec = spec
        self.records: list[AttackRecord] = []
        self.attacked: set[int] = set()
        self.own_txids: set[int] = set()
        #: attacker account per shard, provisioned by the simulation
        self.accounts: dict[int, AccountRef] = {}

    @property
    def active(self) -> bool:
        return self.spec.model is not AdversaryModel.NONE

    def observes(self, shard: int) -> bool:
        return self.active and shard in self.spec.observer_shards

    # -- observation ----------------------------------------------------------

    def on_preview(self, preview: list[Transaction], observer_shard: int, now: int) -> list[PlannedInjection]:
        plans: list[PlannedInjection] = []
        for victim in preview:
            for _ in range(self.spec.n_attackers):
                plan = self.observe_and_inject(victim, observer_shard, now)
                if plan is None:
                    break
                plans.append(plan)
            self.attacked.add(victim.txid)
        return plans

    def observe_and_inject(self, victim: Transaction, observer_shard: int, now: int) -> Optional[PlannedInjection]:
        """Plan one front-running injection against ``victim``, or None when
        the victim is not attackable under the configured model."""
        if not self.active:
            return None
        if victim.txid in self.attacked or victim.txid in self.own_txids:
            return None
        if victim.kind is not TxKind.OSC or victim.contract is None:
            return None
        if not isinstance(victim.payload, SwapCall):
            return None
        if self.spec.model is AdversaryModel.INTRA_SHARD:
            target_shard = victim.contract.shard
        else:
            target_shard = self.spec.attacker_account_shard
            if target_shard is None or victim.contract.shard == target_shard:
                return None
        attacker = self.accounts.get(target_shard)
        if attacker is None:
            return None
        kind = TxKind.INTRA_SHARD if target_shard == victim.contract.shard else TxKind.OSC
        send_time = now + self.spec.reaction_delay
        tx = self.env.factory.new_transaction(
            kind=kind,
            sender=attacker,
            contract=ContractRef(victim.contract.contract, victim.contract.shard),
            payload=SwapCall(coins_in=victim.payload.coins_in),
            submit_time=send_time,
        )
        self.own_txids.add(tx.txid)
        self.env.trace.append(
            now, EventKind.ADVERSARY_OBSERVED, victim.txid, observer_shard,
            contract=victim.contract.contract, attack_txid=tx.txid,
        )
        self.records.append(AttackRecord(
            victim_txid=victim.txid,
            attack_txid=tx.txid,
            contract=victim.contract.contract,
            observed_at=now,
            injected_at=send_time,
        ))
        return PlannedInjection(
            send_time=send_time,
            observer_shard=observer_shard,
            target_shard=target_shard,
            tx=tx,
            victim_txid=victim.txid,
        )


# ---------------------------------------------------------------------------
# Outcome resolution (pure trace analysis).

def first_execution_seq(events: list[TraceEvent]) -> dict[tuple[int, str], int]:
    out: dict[tuple[int, str], int] = {}
    for ev in events:
        if ev.kind == EventKind.EXECUTED.value:
            key = (ev.subject, ev.detail.get("contract"))
            if key not in out:
                out[key] = ev.seq
    return out


def resolve_attack_outcomes(events: list[TraceEvent], records: list[AttackRecord]) -> None:
    firsts = first_execution_seq(events)
    for rec in records:
        atk = firsts.get((rec.attack_txid, rec.contract))
        vic = firsts.get((rec.victim_txid, rec.contract))
        if atk is not None and vic is not None and atk < vic:
            rec.outcome = AttackOutcome.FRONT_RAN
        else:
            rec.outcome = AttackOutcome.FAILED


def attack_success_rate(events: list[TraceEvent], records: list[AttackRecord]) -> float:
    """Fraction of front-running transactions executed before their victims."""
    if not records:
        raise ValueError("attack success rate is undefined without attack records")
    if any(rec.outcome is None for rec in records):
        resolve_attack_outcomes(events, records)
    wins = sum(1 for rec in records if rec.outcome is AttackOutcome.FRONT_RAN)
    return wins / len(records)
