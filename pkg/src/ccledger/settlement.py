"""Indirect-model wholesale settlement application.

The central bank mints and redeems wholesale money held by intermediaries;
intermediaries issue fully backed claims to their clients; registered
assets change hands against cash atomically (delivery versus payment). The
book keeps either mutable account balances or discrete UTXOs; both views
expose the same per-party totals for the same command sequence.

All amounts are integer minor units. Every operation validates completely
before touching state, so a raised error never leaves a partial change;
the optional ``crash_hook`` in ``dvp_settle`` exists for crash-recovery
testing and fires between the mutation steps a machine failure could
split.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

from .errors import (
    AssetError,
    AuthorizationError,
    BackingError,
    FundsError,
    NotFoundError,
    ValidationError,
)

MAX_AMOUNT = 1 << 62


class PartyRole(str, Enum):
    CENTRAL_BANK = "CentralBank"
    INTERMEDIARY = "Intermediary"
    CLIENT = "Client"


class TokenModel(str, Enum):
    ACCOUNT = "Account"
    UTXO = "Utxo"


class DvpOutcome(str, Enum):
    SETTLED = "Settled"


@dataclass
class Party:
    party_id: str
    role: PartyRole
    public_key: bytes
    intermediary_id: str | None = None  # clients attach to exactly one


@dataclass
class Utxo:
    utxo_id: str
    owner: str
    amount: int


@dataclass
class Asset:
    asset_id: str
    issuer: str
    holdings: dict[str, int] = field(default_factory=dict)

    def total(self) -> int:
        return sum(self.holdings.values())


@dataclass
class DvpInstruction:
    instruction_id: str
    seller: str
    buyer: str
    asset_id: str
    quantity: int
    price: int


@dataclass
class SettlementState:
    model: TokenModel = TokenModel.ACCOUNT
    parties: dict[str, Party] = field(default_factory=dict)
    accounts: dict[str, int] = field(default_factory=dict)
    utxos: dict[str, Utxo] = field(default_factory=dict)
    total_minted: int = 0
    total_redeemed: int = 0
    claims: dict[tuple[str, str], int] = field(default_factory=dict)
    assets: dict[str, Asset] = field(default_factory=dict)

    def to_doc(self) -> dict:
        return {
            "model": self.model.value,
            "parties": {
                p.party_id: {
                    "role": p.role.value,
                    "public_key": p.public_key.hex(),
                    "intermediary_id": p.intermediary_id,
                }
                for p in self.parties.values()
            },
            "accounts": dict(sorted(self.accounts.items())),
            "utxos": {
                u.utxo_id: {"owner": u.owner, "amount": u.amount}
                for u in sorted(self.utxos.values(), key=lambda u: u.utxo_id)
            },
            "total_minted": self.total_minted,
            "total_redeemed": self.total_redeemed,
            "claims": {f"{i}/{c}": v for (i, c), v in sorted(self.claims.items())},
            "assets": {
                a.asset_id: {"issuer": a.issuer, "holdings": dict(sorted(a.holdings.items()))}
                for a in self.assets.values()
            },
        }


# -- views ---------------------------------------------------------------


def holding(state: SettlementState, party_id: str) -> int:
    if state.model == TokenModel.ACCOUNT:
        return state.accounts.get(party_id, 0)
    return sum(u.amount for u in state.utxos.values() if u.owner == party_id)


def claims_total(state: SettlementState, intermediary_id: str) -> int:
    return sum(v for (i, _), v in state.claims.items() if i == intermediary_id)


def invariant_violations(state: SettlementState) -> list[str]:
    """Conservation, full backing, per-asset conservation, non-negativity."""
    problems = []
    holdings = {p: holding(state, p) for p in state.parties}
    if state.model == TokenModel.ACCOUNT:
        for p, v in state.accounts.items():
            if v < 0:
                problems.append(f"negative balance for {p}")
    else:
        for u in state.utxos.values():
            if u.amount <= 0:
                problems.append(f"non-positive utxo {u.utxo_id}")
    total = sum(holdings.values())
    if total != state.total_minted - state.total_redeemed:
        problems.append(
            f"conservation broken: holdings {total} != minted {state.total_minted}"
            f" - redeemed {state.total_redeemed}"
        )
    for p in state.parties.values():
        if p.role == PartyRole.INTERMEDIARY:
            if claims_total(state, p.party_id) > holdings.get(p.party_id, 0):
                problems.append(f"backing broken for {p.party_id}")
    for (_, _), v in state.claims.items():
        if v < 0:
            problems.append("negative claim")
    for a in state.assets.values():
        for holder, q in a.holdings.items():
            if q < 0:
                problems.append(f"negative asset holding {a.asset_id}/{holder}")
    return problems


# -- helpers ---------------------------------------------------------------


def _require_amount(amount, what: str = "amount") -> int:
    if not isinstance(amount, int) or isinstance(amount, bool):
        raise ValidationError(f"{what} must be an integer")
    if amount <= 0 or amount > MAX_AMOUNT:
        raise ValidationError(f"{what} must be a positive integer within range")
    return amount


def _require_party(state: SettlementState, party_id, role: PartyRole | None = None) -> Party:
    party = state.parties.get(party_id)
    if party is None:
        raise NotFoundError(f"unknown party {party_id!r}")
    if role is not None and party.role != role:
        raise AuthorizationError(f"party {party_id!r} is not a {role.value}")
    return party


def _select_inputs(state: SettlementState, owner: str, amount: int) -> tuple[list[Utxo], int]:
    """Greedy largest-first input selection; raises when funds fall short."""
    owned = sorted(
        (u for u in state.utxos.values() if u.owner == owner),
        key=lambda u: (-u.amount, u.utxo_id),
    )
    picked: list[Utxo] = []
    total = 0
    for u in owned:
        if total >= amount:
            break
        picked.append(u)
        total += u.amount
    if total < amount:
        raise FundsError(f"{owner} holds {total}, needs {amount}")
    return picked, total


def _move_cash(state: SettlementState, frm: str, to: str, amount: int, tag: str) -> None:
    """Unchecked cash movement; validation happens in the callers."""
    if state.model == TokenModel.ACCOUNT:
        state.accounts[frm] = state.accounts.get(frm, 0) - amount
        state.accounts[to] = state.accounts.get(to, 0) + amount
        if state.accounts[frm] == 0:
            del state.accounts[frm]
        return
    picked, total = _select_inputs(state, frm, amount)
    for u in picked:
        del state.utxos[u.utxo_id]
    state.utxos[f"{tag}:p"] = Utxo(f"{tag}:p", to, amount)
    change = total - amount
    if change > 0:
        state.utxos[f"{tag}:c"] = Utxo(f"{tag}:c", frm, change)


# -- operations --------------------------------------------------------------


def register_party(
    state: SettlementState,
    party_id: str,
    role: PartyRole,
    public_key: bytes,
    intermediary_id: str | None = None,
) -> Party:
    if not party_id or not isinstance(party_id, str):
        raise ValidationError("party_id must be a non-empty string")
    if party_id in state.parties:
        raise ValidationError(f"party {party_id!r} already registered")
    if role == PartyRole.CENTRAL_BANK:
        if any(p.role == PartyRole.CENTRAL_BANK for p in state.parties.values()):
            raise ValidationError("a central bank is already registered")
    if role == PartyRole.CLIENT:
        if intermediary_id is None:
            raise ValidationError("clients attach to exactly one intermediary")
        _require_party(state, intermediary_id, PartyRole.INTERMEDIARY)
    else:
        intermediary_id = None
    party = Party(party_id, role, public_key, intermediary_id)
    state.parties[party_id] = party
    return party


def mint(state: SettlementState, issuer: str, to: str, amount: int, tag: str) -> None:
    amount = _require_amount(amount)
    _require_party(state, issuer, PartyRole.CENTRAL_BANK)
    _require_party(state, to, PartyRole.INTERMEDIARY)
    if state.model == TokenModel.ACCOUNT:
        state.accounts[to] = state.accounts.get(to, 0) + amount
    else:
        state.utxos[f"{tag}:m"] = Utxo(f"{tag}:m", to, amount)
    state.total_minted += amount


def redeem(state: SettlementState, frm: str, amount: int, tag: str) -> None:
    amount = _require_amount(amount)
    _require_party(state, frm, PartyRole.INTERMEDIARY)
    held = holding(state, frm)
    if held < amount:
        raise FundsError(f"{frm} holds {held}, cannot redeem {amount}")
    if held - amount < claims_total(state, frm):
        raise BackingError(
            f"redeeming {amount} leaves {held - amount} below claims {claims_total(state, frm)}"
        )
    if state.model == TokenModel.ACCOUNT:
        state.accounts[frm] = held - amount
        if state.accounts[frm] == 0:
            del state.accounts[frm]
    else:
        picked, total = _select_inputs(state, frm, amount)
        for u in picked:
            del state.utxos[u.utxo_id]
        change = total - amount
        if change > 0:
            state.utxos[f"{tag}:c"] = Utxo(f"{tag}:c", frm, change)
    state.total_redeemed += amount


def transfer_wholesale(state: SettlementState, frm: str, to: str, amount: int, tag: str) -> None:
    amount = _require_amount(amount)
    _require_party(state, frm, PartyRole.INTERMEDIARY)
    _require_party(state, to, PartyRole.INTERMEDIARY)
    if frm == to:
        raise ValidationError("transfer to self")
    held = holding(state, frm)
    if held < amount:
        raise FundsError(f"{frm} holds {held}, cannot pay {amount}")
    if held - amount < claims_total(state, frm):
        raise BackingError(f"transfer breaks full backing for {frm}")
    _move_cash(state, frm, to, amount, tag)


def issue_claim(state: SettlementState, intermediary_id: str, client_id: str, amount: int) -> None:
    amount = _require_amount(amount)
    _require_party(state, intermediary_id, PartyRole.INTERMEDIARY)
    client = _require_party(state, client_id, PartyRole.CLIENT)
    if client.intermediary_id != intermediary_id:
        raise AuthorizationError(f"client {client_id!r} belongs to another intermediary")
    if claims_total(state, intermediary_id) + amount > holding(state, intermediary_id):
        raise BackingError("issuing this claim would exceed the wholesale holding")
    key = (intermediary_id, client_id)
    state.claims[key] = state.claims.get(key, 0) + amount


def retire_claim(state: SettlementState, intermediary_id: str, client_id: str, amount: int) -> None:
    amount = _require_amount(amount)
    _require_party(state, intermediary_id, PartyRole.INTERMEDIARY)
    _require_party(state, client_id, PartyRole.CLIENT)
    key = (intermediary_id, client_id)
    existing = state.claims.get(key, 0)
    if existing < amount:
        raise FundsError(f"claim is {existing}, cannot retire {amount}")
    state.claims[key] = existing - amount
    if state.claims[key] == 0:
        del state.claims[key]


def register_asset(
    state: SettlementState, issuer: str, asset_id: str, quantity: int, initial_holder: str
) -> Asset:
    quantity = _require_amount(quantity, "quantity")
    if not asset_id or not isinstance(asset_id, str):
        raise ValidationError("asset_id must be a non-empty string")
    if asset_id in state.assets:
        raise ValidationError(f"asset {asset_id!r} already registered")
    party = _require_party(state, issuer)
    if party.role == PartyRole.CLIENT:
        raise AuthorizationError("clients cannot issue assets")
    holder = _require_party(state, initial_holder)
    if holder.role == PartyRole.CLIENT:
        raise AuthorizationError("clients cannot hold wholesale assets")
    asset = Asset(asset_id, issuer, {initial_holder: quantity})
    state.assets[asset_id] = asset
    return asset


def dvp_settle(
    state: SettlementState,
    instruction: DvpInstruction,
    tag: str,
    crash_hook: Callable[[str], None] | None = None,
) -> DvpOutcome:
    """Atomic delivery versus payment: asset seller->buyer, cash buyer->seller.

    Both legs are validated before either is applied; any raised error
    leaves the state untouched. ``crash_hook(site)`` fires at
    ``pre_legs`` / ``between_legs`` / ``post_legs`` for fault-injection
    tests only.
    """
    quantity = _require_amount(instruction.quantity, "quantity")
    price = _require_amount(instruction.price, "price")
    seller = _require_party(state, instruction.seller, PartyRole.INTERMEDIARY)
    buyer = _require_party(state, instruction.buyer, PartyRole.INTERMEDIARY)
    if seller.party_id == buyer.party_id:
        raise ValidationError("seller and buyer must differ")
    asset = state.assets.get(instruction.asset_id)
    if asset is None:
        raise NotFoundError(f"unknown asset {instruction.asset_id!r}")
    if asset.holdings.get(seller.party_id, 0) < quantity:
        raise AssetError(
            f"{seller.party_id} holds {asset.holdings.get(seller.party_id, 0)}"
            f" of {asset.asset_id}, needs {quantity}"
        )
    buyer_held = holding(state, buyer.party_id)
    if buyer_held < price:
        raise FundsError(f"{buyer.party_id} holds {buyer_held}, needs {price}")
    if buyer_held - price < claims_total(state, buyer.party_id):
        raise BackingError(f"payment breaks full backing for {buyer.party_id}")

    if crash_hook:
        crash_hook("pre_legs")
    asset.holdings[seller.party_id] -= quantity
    if asset.holdings[seller.party_id] == 0:
        del asset.holdings[seller.party_id]
    asset.holdings[buyer.party_id] = asset.holdings.get(buyer.party_id, 0) + quantity
    if crash_hook:
        crash_hook("between_legs")
    _move_cash(state, buyer.party_id, seller.party_id, price, tag)
    if crash_hook:
        crash_hook("post_legs")
    return DvpOutcome.SETTLED
