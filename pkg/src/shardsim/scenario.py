"""Scenario configuration: schema, TOML loading, validation, CLI overrides,
and the seeded client workload generator.

A scenario fully determines a run: (scenario, seed) -> byte-identical trace.
"""

from __future__ import annotations

import random
import sys
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

if sys.version_info >= (3, 11):  # pragma: no cover
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .contracts import ContractKind
from .model import (
    AccountRef,
    ConfigurationError,
    ContractRef,
    CoinTransferCall,
    SubCall,
    SwapCall,
    TokenTransferCall,
    Transaction,
    TransactionFactory,
    TxKind,
)
from .protocols import ProtocolKind


class ScenarioError(ConfigurationError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class AdversaryModel(str, Enum):
    NONE = "none"
    INTRA_SHARD = "intra_shard"
    CROSS_SHARD = "cross_shard"


@dataclass
class ShardSpec:
    id: int
    block_interval: int
    max_block_txs: Optional[int] = None
    halt_at: Optional[int] = None


@dataclass
class ContractSpec:
    id: str
    kind: ContractKind
    shard: int
    genesis: dict = field(default_factory=dict)


@dataclass
class AccountSpec:
    id: str
    shard: int
    coins: int = 0


@dataclass
class WorkloadSpec:
    rate: float = 0.0
    cross_shard_ratio: float = 0.0
    #: Submission cutoff; None means submissions run the whole duration.
    until: Optional[int] = None
    swap_min: int = 1
    swap_max: int = 5


@dataclass
class AdversarySpec:
    model: AdversaryModel = AdversaryModel.NONE
    observer_shards: tuple[int, ...] = ()
    attacker_account_shard: Optional[int] = None
    reaction_delay: int = 0
    #: How far before finalization the attacker reads a proposed block.
    #: None means the observed shard's intra-shard delay.
    observation_lead: Optional[int] = None
    n_attackers: int = 1
    funds: int = 10**9


@dataclass
class NetworkSpec:
    default_delay: int = 1
    intra_delay: int = 0
    links: dict[tuple[int, int], int] = field(default_factory=dict)

    def delay(self, src: int, dst: int) -> int:
        if (src, dst) in self.links:
            return self.links[(src, dst)]
        return self.intra_delay if src == dst else self.default_delay


@dataclass
class TxSpec:
    submit_time: int
    sender: str
    contract: Optional[str] = None
    payload: Optional[dict] = None
    txid: Optional[int] = None
    relay_delay: int = 0
    sub_calls: tuple[tuple[str, dict], ...] = ()


@dataclass
class Scenario:
    protocol: ProtocolKind = ProtocolKind.HAECHI
    duration: int = 100
    seed: int = 0
    beacon_interval: int = 1
    shards: list[ShardSpec] = field(default_factory=list)
    contracts: list[ContractSpec] = field(default_factory=list)
    accounts: list[AccountSpec] = field(default_factory=list)
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    adversary: AdversarySpec = field(default_factory=AdversarySpec)
    transactions: list[TxSpec] = field(default_factory=list)
    reference_shard: Optional[int] = None
    name: str = "scenario"

    # -- lookups ---------------------------------------------------------------

    def shard_ids(self) -> list[int]:
        return [s.id for s in self.shards]

    def contract_by_id(self, cid: str) -> ContractSpec:
        for c in self.contracts:
            if c.id == cid:
                return c
        raise ScenarioError("transactions", f"unknown contract {cid!r}")

    def account_by_id(self, aid: str) -> AccountSpec:
        for a in self.accounts:
            if a.id == aid:
                return a
        raise ScenarioError("transactions", f"unknown account {aid!r}")

    def effective_reference_shard(self) -> Optional[int]:
        if self.protocol is not ProtocolKind.TWO_PHASE_REFERENCE:
            return None
        if self.reference_shard is not None:
            return self.reference_shard
        return min(self.shard_ids())

    # -- validation --------------------------------------------------------------

    def validate(self) -> None:
        if not self.shards:
            raise ScenarioError("shards", "at least one shard required")
        seen_ids: set[int] = set()
        for i, spec in enumerate(self.shards):
            path = f"shards[{i}]"
            if spec.id == 0:
                raise ScenarioError(f"{path}.id", "0 is reserved for the beacon shard")
            if spec.id < 0:
                raise ScenarioError(f"{path}.id", "shard ids are non-negative")
            if spec.id in seen_ids:
                raise ScenarioError(f"{path}.id", f"duplicate shard id {spec.id}")
            seen_ids.add(spec.id)
            if spec.block_interval < 1:
                raise ScenarioError(f"{path}.block_interval", "must be >= 1")
            if spec.max_block_txs is not None and spec.max_block_txs < 1:
                raise ScenarioError(f"{path}.max_block_txs", "must be >= 1")
        if self.duration < 0:
            raise ScenarioError("duration", "must be >= 0")
        if self.beacon_interval < 1:
            raise ScenarioError("beacon_interval", "must be >= 1")

        seen_contracts: set[str] = set()
        for i, c in enumerate(self.contracts):
            path = f"contracts[{i}]"
            if c.id in seen_contracts:
                raise ScenarioError(f"{path}.id", f"duplicate contract id {c.id!r}")
            seen_contracts.add(c.id)
            if c.shard not in seen_ids:
                raise ScenarioError(f"{path}.shard", f"unknown shard {c.shard}")

        seen_accounts: set[str] = set()
        for i, a in enumerate(self.accounts):
            path = f"accounts[{i}]"
            if a.id in seen_accounts:
                raise ScenarioError(f"{path}.id", f"duplicate account id {a.id!r}")
            seen_accounts.add(a.id)
            if a.shard not in seen_ids:
                raise ScenarioError(f"{path}.shard", f"unknown shard {a.shard}")
            if a.coins < 0:
                raise ScenarioError(f"{path}.coins", "must be >= 0")

        if not (0.0 <= self.workload.cross_shard_ratio <= 1.0):
            raise ScenarioError("workload.cross_shard_ratio", "must be in [0, 1]")
        if self.workload.rate < 0:
            raise ScenarioError("workload.rate", "must be >= 0")

        if self.network.intra_delay < 0:
            raise ScenarioError("network.intra_delay", "must be >= 0")
        if self.network.default_delay < 1:
            raise ScenarioError("network.default_delay", "must be >= 1 between shards")
        for (src, dst), d in self.network.links.items():
            path = f"network.links[{src},{dst}]"
            for end in (src, dst):
                if end != 0 and end not in seen_ids:
                    raise ScenarioError(path, f"unknown shard {end}")
            if src == dst and d < 0:
                raise ScenarioError(path, "intra-shard delay must be >= 0")
            if src != dst and d < 1:
                raise ScenarioError(path, "cross-shard delay must be >= 1")

        adv = self.adversary
        if adv.model is not AdversaryModel.NONE:
            if not adv.observer_shards:
                raise ScenarioError("adversary.observer_shards", "required for an active adversary")
            for s in adv.observer_shards:
                if s not in seen_ids:
                    raise ScenarioError("adversary.observer_shards", f"unknown shard {s}")
            if adv.reaction_delay < 0:
                raise ScenarioError("adversary.reaction_delay", "must be >= 0")
            if adv.n_attackers < 1:
                raise ScenarioError("adversary.n_attackers", "must be >= 1")
        if adv.model is AdversaryModel.CROSS_SHARD:
            if adv.attacker_account_shard is None:
                raise ScenarioError("adversary.attacker_account_shard", "required for the cross-shard model")
            if adv.attacker_account_shard not in seen_ids:
                raise ScenarioError("adversary.attacker_account_shard",
                                    f"unknown shard {adv.attacker_account_shard}")

        if self.reference_shard is not None and self.reference_shard not in seen_ids:
            raise ScenarioError("reference_shard", f"unknown shard {self.reference_shard}")

        for i, t in enumerate(self.transactions):
            path = f"transactions[{i}]"
            if t.sender not in seen_accounts:
                raise ScenarioError(f"{path}.sender", f"unknown account {t.sender!r}")
            if t.contract is not None and t.contract not in seen_contracts:
                raise ScenarioError(f"{path}.contract", f"unknown contract {t.contract!r}")
            if t.submit_time < 0:
                raise ScenarioError(f"{path}.submit_time", "must be >= 0")
            if t.payload is None:
                raise ScenarioError(f"{path}.payload", "required")
            if t.sub_calls and not self.protocol.ordered:
                raise ScenarioError(f"{path}.sub_calls",
                                    "multi-shard calls require an ordered protocol")
            for j, (cid, _call) in enumerate(t.sub_calls):
                if cid not in seen_contracts:
                    raise ScenarioError(f"{path}.sub_calls[{j}]", f"unknown contract {cid!r}")


# ---------------------------------------------------------------------------
# TOML loading.

def _parse_payload(raw: dict, path: str) -> dict:
    if not isinstance(raw, dict) or "kind" not in raw:
        raise ScenarioError(path, "payload must be a table with a 'kind' key")
    return raw


def scenario_from_dict(data: dict, name: str = "scenario") -> Scenario:
    try:
        protocol = ProtocolKind(data.get("protocol", "haechi"))
    except ValueError:
        raise ScenarioError("protocol", f"unknown protocol {data.get('protocol')!r}") from None

    shards = [
        ShardSpec(
            id=int(s["id"]),
            block_interval=int(s.get("block_interval", 1)),
            max_block_txs=s.get("max_block_txs"),
            halt_at=s.get("halt_at"),
        )
        for s in data.get("shards", [])
    ]
    contracts = []
    for c in data.get("contracts", []):
        try:
            kind = ContractKind(c.get("kind", "token_exchange"))
        except ValueError:
            raise ScenarioError("contracts", f"unknown contract kind {c.get('kind')!r}") from None
        contracts.append(ContractSpec(id=str(c["id"]), kind=kind, shard=int(c["shard"]),
                                      genesis=dict(c.get("genesis", {}))))
    accounts = [
        AccountSpec(id=str(a["id"]), shard=int(a["shard"]), coins=int(a.get("coins", 0)))
        for a in data.get("accounts", [])
    ]
    w = data.get("workload", {})
    workload = WorkloadSpec(
        rate=float(w.get("rate", 0.0)),
        cross_shard_ratio=float(w.get("cross_shard_ratio", 0.0)),
        until=w.get("until"),
        swap_min=int(w.get("swap_min", 1)),
        swap_max=int(w.get("swap_max", 5)),
    )
    n = data.get("network", {})
    links: dict[tuple[int, int], int] = {}
    for link in n.get("links", []):
        links[(int(link["src"]), int(link["dst"]))] = int(link["delay"])
        if link.get("symmetric", False):
            links[(int(link["dst"]), int(link["src"]))] = int(link["delay"])
    network = NetworkSpec(
        default_delay=int(n.get("default_delay", 1)),
        intra_delay=int(n.get("intra_delay", 0)),
        links=links,
    )
    adv = data.get("adversary", {})
    try:
        model = AdversaryModel(adv.get("model", "none"))
    except ValueError:
        raise ScenarioError("adversary.model", f"unknown model {adv.get('model')!r}") from None
    adversary = AdversarySpec(
        model=model,
        observer_shards=tuple(int(s) for s in adv.get("observer_shards", [])),
        attacker_account_shard=adv.get("attacker_account_shard"),
        reaction_delay=int(adv.get("reaction_delay", 0)),
        observation_lead=adv.get("observation_lead"),
        n_attackers=int(adv.get("n_attackers", 1)),
        funds=int(adv.get("funds", 10**9)),
    )
    transactions = []
    for i, t in enumerate(data.get("transactions", [])):
        transactions.append(
            TxSpec(
                submit_time=int(t["submit_time"]),
                sender=str(t["sender"]),
                contract=t.get("contract"),
                payload=_parse_payload(t.get("payload"), f"transactions[{i}].payload"),
                txid=t.get("txid"),
                relay_delay=int(t.get("relay_delay", 0)),
                sub_calls=tuple(
                    (str(sc["contract"]), dict(sc["call"])) for sc in t.get("sub_calls", [])
                ),
            )
        )
    scenario = Scenario(
        protocol=protocol,
        duration=int(data.get("duration", 100)),
        seed=int(data.get("seed", 0)),
        beacon_interval=int(data.get("beacon_interval", 1)),
        shards=shards,
        contracts=contracts,
        accounts=accounts,
        workload=workload,
        network=network,
        adversary=adversary,
        transactions=transactions,
        reference_shard=data.get("reference_shard"),
        name=name,
    )
    scenario.validate()
    return scenario


def load_scenario(path: str) -> Scenario:
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    name = path.rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return scenario_from_dict(data, name=name)


# ---------------------------------------------------------------------------
# CLI overrides.

def apply_overrides(
    scenario: Scenario,
    protocol: Optional[str] = None,
    seed: Optional[int] = None,
    duration: Optional[int] = None,
    shards: Optional[int] = None,
    workload: Optional[float] = None,
    cross_shard_ratio: Optional[float] = None,
    adversary: Optional[str] = None,
    n_attackers: Optional[int] = None,
) -> Scenario:
    out = replace(scenario)
    if protocol is not None:
        try:
            out.protocol = ProtocolKind(protocol)
        except ValueError:
            raise ScenarioError("protocol", f"unknown protocol {protocol!r}") from None
    if seed is not None:
        out.seed = seed
    if duration is not None:
        out.duration = duration
    if workload is not None:
        out.workload = replace(out.workload, rate=workload)
    if cross_shard_ratio is not None:
        out.workload = replace(out.workload, cross_shard_ratio=cross_shard_ratio)
    if adversary is not None:
        try:
            out.adversary = replace(out.adversary, model=AdversaryModel(adversary))
        except ValueError:
            raise ScenarioError("adversary.model", f"unknown model {adversary!r}") from None
    if n_attackers is not None:
        out.adversary = replace(out.adversary, n_attackers=n_attackers)
    if shards is not None:
        out = regenerate_topology(out, shards)
    out.validate()
    return out


def regenerate_topology(scenario: Scenario, n_shards: int) -> Scenario:
    """Rebuild the scenario with ``n_shards`` shards: intervals cycle through
    the base list, one exchange contract and two funded accounts per shard.
    Only usable for generated workloads (explicit transactions would dangle).
    """
    if n_shards < 1:
        raise ScenarioError("shards", "shard count must be >= 1")
    if scenario.transactions:
        raise ScenarioError("shards", "cannot regenerate topology with explicit transactions")
    intervals = [s.block_interval for s in scenario.shards] or [1]
    shards = [ShardSpec(id=i, block_interval=intervals[(i - 1) % len(intervals)])
              for i in range(1, n_shards + 1)]
    contracts = [
        ContractSpec(id=f"dex{i}", kind=ContractKind.TOKEN_EXCHANGE, shard=i,
                     genesis={"coin_reserve": 10**6, "token_reserve": 10**6})
        for i in range(1, n_shards + 1)
    ]
    accounts = []
    for i in range(1, n_shards + 1):
        accounts.append(AccountSpec(id=f"user{i}a", shard=i, coins=10**6))
        accounts.append(AccountSpec(id=f"user{i}b", shard=i, coins=10**6))
    out = replace(scenario, shards=shards, contracts=contracts, accounts=accounts)
    return out


# ---------------------------------------------------------------------------
# Seeded workload generation.

def build_transactions(scenario: Scenario, factory: TransactionFactory) -> list[Transaction]:
    """Explicit transactions followed by the generated client workload,
    sorted by submission time (stable: explicit first at equal times)."""
    txs: list[Transaction] = []
    for spec in scenario.transactions:
        txs.append(_build_explicit(scenario, factory, spec))
    txs.extend(_generate_workload(scenario, factory))
    txs.sort(key=lambda tx: tx.submit_time)
    return txs


def _payload_from_dict(scenario: Scenario, raw: dict, path: str):
    kind = raw.get("kind")
    if kind == "swap":
        return SwapCall(coins_in=int(raw["coins_in"]))
    if kind == "token_transfer":
        return TokenTransferCall(recipient=str(raw["recipient"]), amount=int(raw["amount"]))
    if kind == "coin_transfer":
        acct = scenario.account_by_id(str(raw["recipient"]))
        return CoinTransferCall(recipient=AccountRef(acct.id, acct.shard), amount=int(raw["amount"]))
    raise ScenarioError(path, f"unknown payload kind {kind!r}")


def _build_explicit(scenario: Scenario, factory: TransactionFactory, spec: TxSpec) -> Transaction:
    sender_acct = scenario.account_by_id(spec.sender)
    sender = AccountRef(sender_acct.id, sender_acct.shard)
    payload = _payload_from_dict(scenario, spec.payload, "transactions.payload")
    contract = None
    if spec.contract is not None:
        cspec = scenario.contract_by_id(spec.contract)
        contract = ContractRef(cspec.id, cspec.shard)
        kind = TxKind.OSC if cspec.shard != sender.shard else TxKind.INTRA_SHARD
    elif isinstance(payload, CoinTransferCall):
        kind = (TxKind.CROSS_SHARD_TRANSFER
                if payload.recipient.shard != sender.shard else TxKind.INTRA_SHARD)
    else:
        raise ScenarioError("transactions", "contract required for contract-call payloads")
    sub_calls = []
    for cid, call_raw in spec.sub_calls:
        cspec = scenario.contract_by_id(cid)
        call = _payload_from_dict(scenario, call_raw, "transactions.sub_calls")
        if isinstance(call, CoinTransferCall):
            raise ScenarioError("transactions.sub_calls", "sub-calls must be contract calls")
        sub_calls.append(SubCall(ContractRef(cspec.id, cspec.shard), call))
    return factory.new_transaction(
        kind=kind, sender=sender, contract=contract, payload=payload,
        submit_time=spec.submit_time, sub_calls=tuple(sub_calls),
        txid=spec.txid, relay_delay=spec.relay_delay,
    )


def _generate_workload(scenario: Scenario, factory: TransactionFactory) -> list[Transaction]:
    w = scenario.workload
    if w.rate <= 0:
        return []
    rng = random.Random(scenario.seed)
    until = w.until if w.until is not None else scenario.duration
    accounts_by_shard: dict[int, list[AccountSpec]] = {}
    for a in scenario.accounts:
        accounts_by_shard.setdefault(a.shard, []).append(a)
    exchanges_by_shard: dict[int, list[ContractSpec]] = {}
    for c in scenario.contracts:
        if c.kind is ContractKind.TOKEN_EXCHANGE:
            exchanges_by_shard.setdefault(c.shard, []).append(c)
    all_exchanges = [c for cs in exchanges_by_shard.values() for c in cs]

    out: list[Transaction] = []
    for t in range(1, max(until, 0) + 1):
        for shard in scenario.shard_ids():
            senders = accounts_by_shard.get(shard)
            if not senders:
                continue
            count = int(w.rate)
            if rng.random() < w.rate - count:
                count += 1
            for _ in range(count):
                sender_spec = rng.choice(senders)
                sender = AccountRef(sender_spec.id, sender_spec.shard)
                remote = [c for c in all_exchanges if c.shard != shard]
                local = exchanges_by_shard.get(shard, [])
                go_cross = rng.random() < w.cross_shard_ratio and remote
                if go_cross:
                    target = rng.choice(remote)
                elif local:
                    target = rng.choice(local)
                elif remote:
                    target = rng.choice(remote)
                else:
                    continue
                amount = rng.randint(w.swap_min, w.swap_max)
                kind = TxKind.OSC if target.shard != shard else TxKind.INTRA_SHARD
                out.append(factory.new_transaction(
                    kind=kind, sender=sender,
                    contract=ContractRef(target.id, target.shard),
                    payload=SwapCall(coins_in=amount),
                    submit_time=t,
                ))
    return out
