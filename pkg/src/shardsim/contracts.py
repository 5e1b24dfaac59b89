"""Deterministic contract execution semantics.

Two contract kinds make execution order economically observable: a
constant-product token exchange (each swap moves the price seen by the next
swap) and a plain token ledger (a transfer can only succeed after the funds
it spends have arrived).  All arithmetic is integer with floor division and
no fees, so every run is exactly reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

from .model import ContractCall, SubCall, SwapCall, TokenTransferCall


class ContractKind(str, Enum):
    TOKEN_EXCHANGE = "token_exchange"
    TOKEN_LEDGER = "token_ledger"


class ContractError(ValueError):
    pass


class SnapshotError(RuntimeError):
    """Snapshot rolled back more than once."""


@dataclass
class TokenExchangeState:
    contract_id: str
    coin_reserve: int
    token_reserve: int

    kind = ContractKind.TOKEN_EXCHANGE

    def copy(self) -> "TokenExchangeState":
        return TokenExchangeState(self.contract_id, self.coin_reserve, self.token_reserve)

    def as_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "coin_reserve": self.coin_reserve,
            "token_reserve": self.token_reserve,
        }


@dataclass
class TokenLedgerState:
    contract_id: str
    balances: dict[str, int] = field(default_factory=dict)

    kind = ContractKind.TOKEN_LEDGER

    def copy(self) -> "TokenLedgerState":
        return TokenLedgerState(self.contract_id, dict(self.balances))

    def as_dict(self) -> dict:
        return {"kind": self.kind.value, "balances": dict(self.balances)}


ContractState = Union[TokenExchangeState, TokenLedgerState]


@dataclass(frozen=True)
class ExecResult:
    success: bool
    return_value: Optional[int]
    sub_calls: tuple[SubCall, ...] = ()


def quote_swap(coin_reserve: int, token_reserve: int, coins_in: int) -> int:
    """Constant-product output: floor(token_reserve * coins_in / (coin_reserve + coins_in))."""
    return (token_reserve * coins_in) // (coin_reserve + coins_in)


def execute_call(
    state: ContractState,
    caller: str,
    call: ContractCall,
    sub_calls: tuple[SubCall, ...] = (),
) -> ExecResult:
    """Apply one contract call in place.

    On failure the state is left untouched and ``success`` is False.  Declared
    sub-calls are surfaced on success so the engine can fan them out; the VM
    itself never dispatches across shards.
    """
    if isinstance(state, TokenExchangeState):
        if not isinstance(call, SwapCall):
            raise ContractError(f"{state.contract_id}: exchange expects a swap call")
        if call.coins_in <= 0:
            return ExecResult(False, None)
        tokens_out = quote_swap(state.coin_reserve, state.token_reserve, call.coins_in)
        if tokens_out <= 0 or tokens_out > state.token_reserve:
            return ExecResult(False, None)
        state.coin_reserve += call.coins_in
        state.token_reserve -= tokens_out
        return ExecResult(True, tokens_out, sub_calls)

    if isinstance(state, TokenLedgerState):
        if not isinstance(call, TokenTransferCall):
            raise ContractError(f"{state.contract_id}: ledger expects a token transfer")
        if call.amount <= 0:
            return ExecResult(False, None)
        if state.balances.get(caller, 0) < call.amount:
            return ExecResult(False, None)
        state.balances[caller] = state.balances.get(caller, 0) - call.amount
        state.balances[call.recipient] = state.balances.get(call.recipient, 0) + call.amount
        return ExecResult(True, call.amount, sub_calls)

    raise ContractError(f"unknown contract state {type(state).__name__}")


@dataclass
class StateSnapshot:
    contract_id: str
    owner_txid: int
    saved: ContractState
    used: bool = False


def take_snapshot(state: ContractState, txid: int) -> StateSnapshot:
    return StateSnapshot(contract_id=state.contract_id, owner_txid=txid, saved=state.copy())


def rollback(snapshot: StateSnapshot) -> ContractState:
    """Return the saved pre-image.  Single use: a snapshot is either discarded
    at commit or rolled back exactly once."""
    if snapshot.used:
        raise SnapshotError(f"snapshot for tx {snapshot.owner_txid} already rolled back")
    snapshot.used = True
    return snapshot.saved


def make_contract_state(contract_id: str, kind: ContractKind, genesis: dict) -> ContractState:
    if kind is ContractKind.TOKEN_EXCHANGE:
        coin = int(genesis.get("coin_reserve", 0))
        token = int(genesis.get("token_reserve", 0))
        if coin < 0 or token < 0:
            raise ContractError(f"{contract_id}: negative reserves")
        return TokenExchangeState(contract_id, coin, token)
    if kind is ContractKind.TOKEN_LEDGER:
        balances = {str(k): int(v) for k, v in genesis.get("balances", {}).items()}
        if any(v < 0 for v in balances.values()):
            raise ContractError(f"{contract_id}: negative balance")
        return TokenLedgerState(contract_id, balances)
    raise ContractError(f"unknown contract kind {kind!r}")
