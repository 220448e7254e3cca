"""Committed-command application.

One committed Raft command maps to at most one ledger entry: the applier
validates the wrapped client request against committed state, mutates the
governance/settlement state, and appends a single entry holding the
request envelope (plus effect records for resolved proposals). Failed
commands append nothing and fail identically on re-execution, so recovery
can replay the ledger into a fresh state and re-apply any raft-log suffix
without double effects. Command ids deduplicate retries.

Confidential mode keeps private request bodies encrypted while they sit in
the raft log (the leader seals them under the service data key before
proposing) and stores the resulting ledger entries as ciphertext.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

from . import crypto, enclave, governance, settlement
from .codec import canonical_json_bytes
from .errors import (
    AuthenticationError,
    AuthorizationError,
    CclError,
    CodecError,
    NotFoundError,
    ServiceNotOpenError,
    StateError,
    ValidationError,
    status_for,
)
from .governance import GovernanceState, ServicePhase
from .ledger import EntryKind, Ledger, Privacy
from .settlement import DvpInstruction, PartyRole, SettlementState, TokenModel

REQUEST_SIGN_DOMAIN = b"ccl.request.v1\0"
COSIGN_DOMAIN = b"ccl.cosign.v1\0"
DVP_COUNTERPARTY_DOMAIN = b"ccl.dvp.v1\0"
COMMAND_AAD = b"ccl.command.v1"

WRITE_PATHS = frozenset(
    {
        "/genesis/constitution",
        "/genesis/service",
        "/gov/propose",
        "/gov/vote",
        "/node/admit",
        "/node/remove",
        "/node/sign-root",
        "/app/register-party",
        "/app/mint",
        "/app/redeem",
        "/app/transfer",
        "/app/issue-claim",
        "/app/retire-claim",
        "/app/register-asset",
        "/app/dvp",
    }
)


def request_signing_message(path: str, body: dict) -> bytes:
    return REQUEST_SIGN_DOMAIN + path.encode() + b"\0" + canonical_json_bytes(body)


def cosign_message(core: dict) -> bytes:
    return COSIGN_DOMAIN + canonical_json_bytes(core)


def dvp_counterparty_message(core: dict) -> bytes:
    return DVP_COUNTERPARTY_DOMAIN + canonical_json_bytes(core)


def wrap_command(
    cmd_id: str,
    path: str,
    signer: str,
    body: dict,
    signature_hex: str,
    *,
    private: bool = False,
    data_key: bytes | None = None,
) -> bytes:
    """Build the raft command bytes for one client request.

    Private commands keep the request sealed while replicated; only holders
    of the service data key (the appliers) see the plaintext.
    """
    inner = {"path": path, "signer": signer, "body": body, "sig": signature_hex}
    if private:
        if data_key is None:
            raise StateError("private command without a data key")
        nonce = crypto.random_bytes(crypto.NONCE_LEN)
        sealed = crypto.aead_encrypt(
            data_key, nonce, canonical_json_bytes(inner), COMMAND_AAD
        )
        doc = {"v": 1, "cmd": cmd_id, "private": True, "nonce": nonce.hex(), "enc": sealed.hex()}
    else:
        doc = {"v": 1, "cmd": cmd_id, "private": False, **inner}
    return canonical_json_bytes(doc)


@dataclass
class ApplyResult:
    status: int
    body: dict
    seqno: int | None = None

    @property
    def ok(self) -> bool:
        return self.status == 200


@dataclass
class NodeRecord:
    node_id: str
    node_address: str
    rpc_address: str
    identity: bytes


@dataclass
class AppState:
    governance: GovernanceState = field(default_factory=GovernanceState)
    settlement: SettlementState = field(default_factory=SettlementState)
    membership: dict[str, NodeRecord] = field(default_factory=dict)
    applied_commands: dict[str, int] = field(default_factory=dict)  # cmd -> seqno

    def to_doc(self) -> dict:
        return {
            "governance": self.governance.to_doc(),
            "settlement": self.settlement.to_doc(),
            "membership": {
                n.node_id: {
                    "node_address": n.node_address,
                    "rpc_address": n.rpc_address,
                    "identity": n.identity.hex(),
                }
                for n in self.membership.values()
            },
            "applied_commands": dict(sorted(self.applied_commands.items())),
        }


class Applier:
    """Deterministic state machine fed exclusively by committed commands."""

    def __init__(
        self,
        ledger: Ledger,
        *,
        confidential: bool = True,
        data_key: bytes | None = None,
        crash_hook: Callable[[str], None] | None = None,
    ):
        self.ledger = ledger
        self.confidential = confidential
        self.data_key = data_key
        self.crash_hook = crash_hook
        self.state = AppState()
        self._pending_constitution: dict | None = None
        self.applied_log_count = 0  # raft log positions consumed

    # -- recovery ---------------------------------------------------------

    def replay(self) -> None:
        """Rebuild all state from the ledger (fresh state assumed)."""
        for entry in self.ledger.entries():
            if entry.kind == EntryKind.SIGNATURE:
                continue
            payload = self.ledger.decrypt_payload(entry, self.data_key)
            envelope = json.loads(payload.decode())
            result, effects = self._execute(
                envelope["path"],
                envelope["signer"],
                envelope["body"],
                envelope["sig"],
                envelope["cmd"],
            )
            if envelope.get("effects") is not None and effects != envelope["effects"]:
                raise StateError(
                    f"replay effects mismatch at seqno {entry.seqno}: ledger damaged"
                )
            self.state.applied_commands[envelope["cmd"]] = entry.seqno
            self.applied_log_count = max(self.applied_log_count, envelope["li"] + 1)

    # -- live application ---------------------------------------------------

    def apply_command(self, command: bytes, log_index: int) -> ApplyResult:
        self.applied_log_count = max(self.applied_log_count, log_index + 1)
        try:
            doc = json.loads(command.decode())
            cmd_id = doc["cmd"]
            if doc.get("private"):
                if self.data_key is None:
                    raise StateError("no data key for a private command")
                inner = json.loads(
                    crypto.aead_decrypt(
                        self.data_key,
                        bytes.fromhex(doc["nonce"]),
                        bytes.fromhex(doc["enc"]),
                        COMMAND_AAD,
                    ).decode()
                )
            else:
                inner = doc
            path, signer = inner["path"], inner["signer"]
            body, sig = inner["body"], inner["sig"]
        except (ValueError, KeyError) as exc:
            return ApplyResult(400, _err("codec", f"malformed command: {exc}"))

        if cmd_id in self.state.applied_commands:
            return ApplyResult(
                200, {"deduplicated": True}, self.state.applied_commands[cmd_id]
            )

        if path == "/node/sign-root":
            if self.ledger.signed_coverage >= self.ledger.count:
                return ApplyResult(200, {"signed": False})
            seqno = self.ledger.sign_root()
            return ApplyResult(200, {"signed": True}, seqno)

        if self.crash_hook:
            self.crash_hook("pre_execute")
        try:
            result, effects = self._execute(path, signer, body, sig, cmd_id)
        except CclError as exc:
            return ApplyResult(status_for(exc), _err(exc.code, exc.message, exc.detail))

        envelope = {
            "v": 1,
            "cmd": cmd_id,
            "li": log_index,
            "path": path,
            "signer": signer,
            "body": body,
            "sig": sig,
        }
        if effects:
            envelope["effects"] = effects
        private_entry = (
            self.confidential
            and path.startswith("/app/")
            and body.get("privacy") == "Private"
        )
        if self.crash_hook:
            self.crash_hook("pre_append")
        kind = EntryKind.APP if path.startswith("/app/") else EntryKind.GOVERNANCE
        seqno, _root = self.ledger.append(
            kind,
            Privacy.PRIVATE if private_entry else Privacy.PUBLIC,
            canonical_json_bytes(envelope),
        )
        if self.crash_hook:
            self.crash_hook("post_append")
        self.state.applied_commands[cmd_id] = seqno
        return ApplyResult(200, result, seqno)

    # -- request execution ---------------------------------------------------

    def _execute(
        self, path: str, signer: str, body: dict, sig_hex: str, cmd_id: str
    ) -> tuple[dict, list[dict] | None]:
        if path not in WRITE_PATHS:
            raise NotFoundError(f"unknown write path {path!r}")
        if not isinstance(body, dict):
            raise ValidationError("body must be a JSON object")
        handler = getattr(self, "_do_" + path[1:].replace("/", "_").replace("-", "_"))
        return handler(signer, body, sig_hex, cmd_id)

    def _signature(self, sig_hex: str) -> bytes:
        try:
            return bytes.fromhex(sig_hex)
        except (ValueError, TypeError) as exc:
            raise AuthenticationError(f"undecodable signature: {exc}") from exc

    def _verify_member(self, signer: str, path: str, body: dict, sig_hex: str):
        message = request_signing_message(path, body)
        return governance.authenticate_member(
            self.state.governance, signer, message, self._signature(sig_hex)
        )

    def _verify_party(
        self, signer: str, path: str, body: dict, sig_hex: str, role: PartyRole | None = None
    ) -> settlement.Party:
        party = self.state.settlement.parties.get(signer)
        if party is None:
            raise AuthorizationError(f"signer {signer!r} is not a registered party")
        if role is not None and party.role != role:
            raise AuthorizationError(f"signer {signer!r} is not a {role.value}")
        message = request_signing_message(path, body)
        if not crypto.verify_signature(party.public_key, self._signature(sig_hex), message):
            raise AuthenticationError(f"bad signature from party {signer!r}")
        return party

    def _require_open(self) -> None:
        if self.state.governance.service.phase != ServicePhase.OPEN:
            raise ServiceNotOpenError("settlement transactions rejected while Opening")

    # genesis ----------------------------------------------------------------

    def _do_genesis_constitution(self, signer, body, sig, cmd_id):
        if self.state.governance.initialized or self._pending_constitution is not None:
            raise StateError("genesis already consumed")
        if "constitution" not in body:
            raise ValidationError("missing constitution document")
        self._pending_constitution = body["constitution"]
        return {"staged": True}, None

    def _do_genesis_service(self, signer, body, sig, cmd_id):
        if self._pending_constitution is None:
            raise StateError("constitution must precede the service record")
        governance.genesis(
            self.state.governance,
            self._pending_constitution,
            body["members"],
            bytes.fromhex(body["service_identity"]),
            [bytes.fromhex(d) for d in body.get("trusted_measurements", [])],
            {k: bytes.fromhex(v) for k, v in body.get("trusted_platforms", {}).items()},
            body.get("allowed_join_node_ids", []),
        )
        self.state.settlement = SettlementState(
            model=TokenModel(body.get("token_model", "Account"))
        )
        node = body["node"]
        self.state.membership[node["node_id"]] = NodeRecord(
            node["node_id"],
            node["node_address"],
            node["rpc_address"],
            bytes.fromhex(node["identity"]),
        )
        return {"initialized": True}, None

    # governance --------------------------------------------------------------

    def _do_gov_propose(self, signer, body, sig, cmd_id):
        self._verify_member(signer, "/gov/propose", body, sig)
        proposal = governance.submit_proposal(
            self.state.governance, signer, body.get("action", ""), body.get("payload", {})
        )
        return {"proposal_id": proposal.proposal_id, "state": proposal.state.value}, None

    def _do_gov_vote(self, signer, body, sig, cmd_id):
        self._verify_member(signer, "/gov/vote", body, sig)
        proposal, effects = governance.vote(
            self.state.governance, signer, body.get("proposal_id", ""), body.get("ballot", "")
        )
        result = {
            "proposal_id": proposal.proposal_id,
            "state": proposal.state.value,
            "effects": effects,
        }
        return result, effects or None

    # node lifecycle ------------------------------------------------------------

    def _do_node_admit(self, signer, body, sig, cmd_id):
        node_id = body.get("node_id", "")
        if not node_id:
            raise ValidationError("missing node_id")
        if node_id in self.state.membership:
            raise StateError(f"node {node_id!r} already a member of the cluster")
        if self.confidential:
            try:
                quote = enclave.decode_quote(bytes.fromhex(body["quote"]))
            except (KeyError, ValueError, CodecError) as exc:
                raise ValidationError(f"undecodable quote: {exc}") from exc
            verdict = governance.process_join_request(self.state.governance, quote)
            if not verdict.accepted:
                raise AuthorizationError(verdict.reason.value)
            identity = quote.node_identity
        else:
            allowed = self.state.governance.service.allowed_join_node_ids
            if node_id not in allowed:
                raise AuthorizationError(f"node {node_id!r} not on the join allowlist")
            try:
                identity = bytes.fromhex(body["identity"])
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"missing node identity: {exc}") from exc
        self.state.membership[node_id] = NodeRecord(
            node_id, body.get("node_address", ""), body.get("rpc_address", ""), identity
        )
        return {
            "admitted": node_id,
            "membership": sorted(self.state.membership),
        }, None

    def _do_node_remove(self, signer, body, sig, cmd_id):
        node_id = body.get("node_id", "")
        record = self.state.membership.get(node_id)
        if record is None:
            raise NotFoundError(f"unknown node {node_id!r}")
        if len(self.state.membership) == 1:
            raise StateError("refusing to remove the last node")
        message = request_signing_message("/node/remove", body)
        if signer != node_id or not crypto.verify_signature(
            record.identity, self._signature(sig), message
        ):
            raise AuthorizationError("node removal must be signed by the node itself")
        del self.state.membership[node_id]
        return {"removed": node_id, "membership": sorted(self.state.membership)}, None

    # settlement ---------------------------------------------------------------

    def _central_bank(self) -> settlement.Party:
        for p in self.state.settlement.parties.values():
            if p.role == PartyRole.CENTRAL_BANK:
                return p
        raise StateError("no central bank registered")

    def _do_app_register_party(self, signer, body, sig, cmd_id):
        self._require_open()
        try:
            role = PartyRole(body.get("role", ""))
            public_key = bytes.fromhex(body["public_key"])
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"bad party record: {exc}") from exc
        if role == PartyRole.CENTRAL_BANK:
            # the consortium itself underwrites the central bank identity
            self._verify_member(signer, "/app/register-party", body, sig)
        elif role == PartyRole.INTERMEDIARY:
            self._verify_party(signer, "/app/register-party", body, sig, PartyRole.CENTRAL_BANK)
        else:
            party = self._verify_party(
                signer, "/app/register-party", body, sig, PartyRole.INTERMEDIARY
            )
            if body.get("intermediary_id") != party.party_id:
                raise AuthorizationError("clients are registered by their own intermediary")
        registered = settlement.register_party(
            self.state.settlement,
            body.get("party_id", ""),
            role,
            public_key,
            body.get("intermediary_id"),
        )
        return {"party_id": registered.party_id, "role": registered.role.value}, None

    def _do_app_mint(self, signer, body, sig, cmd_id):
        self._require_open()
        self._verify_party(signer, "/app/mint", body, sig, PartyRole.CENTRAL_BANK)
        settlement.mint(
            self.state.settlement, signer, body.get("to", ""), body.get("amount"), cmd_id
        )
        return {
            "to": body.get("to"),
            "amount": body.get("amount"),
            "total_minted": self.state.settlement.total_minted,
        }, None

    def _do_app_redeem(self, signer, body, sig, cmd_id):
        self._require_open()
        self._verify_party(signer, "/app/redeem", body, sig, PartyRole.INTERMEDIARY)
        if signer != body.get("from"):
            raise AuthorizationError("redeem must be signed by the redeeming intermediary")
        cosign = body.get("cb_cosign") or {}
        cb = self._central_bank()
        core = {"from": body.get("from"), "amount": body.get("amount")}
        if cosign.get("signer_id") != cb.party_id or not crypto.verify_signature(
            cb.public_key,
            self._signature(cosign.get("signature", "")),
            cosign_message(core),
        ):
            raise AuthenticationError("redeem requires a central bank co-signature")
        settlement.redeem(self.state.settlement, body["from"], body.get("amount"), cmd_id)
        return {
            "from": body["from"],
            "amount": body["amount"],
            "total_redeemed": self.state.settlement.total_redeemed,
        }, None

    def _do_app_transfer(self, signer, body, sig, cmd_id):
        self._require_open()
        self._verify_party(signer, "/app/transfer", body, sig, PartyRole.INTERMEDIARY)
        if signer != body.get("from"):
            raise AuthorizationError("transfer must be signed by the paying intermediary")
        settlement.transfer_wholesale(
            self.state.settlement, body["from"], body.get("to", ""), body.get("amount"), cmd_id
        )
        return {"from": body["from"], "to": body.get("to"), "amount": body.get("amount")}, None

    def _do_app_issue_claim(self, signer, body, sig, cmd_id):
        self._require_open()
        self._verify_party(signer, "/app/issue-claim", body, sig, PartyRole.INTERMEDIARY)
        settlement.issue_claim(
            self.state.settlement, signer, body.get("client_id", ""), body.get("amount")
        )
        return {"intermediary_id": signer, "client_id": body.get("client_id")}, None

    def _do_app_retire_claim(self, signer, body, sig, cmd_id):
        self._require_open()
        self._verify_party(signer, "/app/retire-claim", body, sig, PartyRole.INTERMEDIARY)
        settlement.retire_claim(
            self.state.settlement, signer, body.get("client_id", ""), body.get("amount")
        )
        return {"intermediary_id": signer, "client_id": body.get("client_id")}, None

    def _do_app_register_asset(self, signer, body, sig, cmd_id):
        self._require_open()
        self._verify_party(signer, "/app/register-asset", body, sig)
        asset = settlement.register_asset(
            self.state.settlement,
            signer,
            body.get("asset_id", ""),
            body.get("quantity"),
            body.get("initial_holder", ""),
        )
        return {"asset_id": asset.asset_id, "issuer": asset.issuer}, None

    def _do_app_dvp(self, signer, body, sig, cmd_id):
        self._require_open()
        self._verify_party(signer, "/app/dvp", body, sig, PartyRole.INTERMEDIARY)
        core = {
            k: body.get(k)
            for k in ("instruction_id", "seller", "buyer", "asset_id", "quantity", "price")
        }
        if signer != core["seller"]:
            raise AuthorizationError("delivery instructions must be signed by the seller")
        buyer = self.state.settlement.parties.get(core["buyer"] or "")
        if buyer is None:
            raise NotFoundError(f"unknown buyer {core['buyer']!r}")
        if not crypto.verify_signature(
            buyer.public_key,
            self._signature(body.get("counterparty_sig", "")),
            dvp_counterparty_message(core),
        ):
            raise AuthenticationError("payment leg requires the buyer's counter-signature")
        instruction = DvpInstruction(
            core["instruction_id"] or cmd_id,
            core["seller"],
            core["buyer"],
            core["asset_id"] or "",
            core["quantity"],
            core["price"],
        )
        outcome = settlement.dvp_settle(
            self.state.settlement, instruction, cmd_id, self.crash_hook
        )
        return {"outcome": outcome.value, "instruction_id": instruction.instruction_id}, None

    # -- reads (served from committed state, no consensus round) -----------------

    def handle_read(self, path: str, body: dict, signer: str, sig_hex: str) -> dict:
        if path == "/gov/proposal":
            p = self.state.governance.proposals.get(body.get("proposal_id", ""))
            if p is None:
                raise NotFoundError("no such proposal")
            return {
                "proposal_id": p.proposal_id,
                "proposer": p.proposer,
                "action": p.action,
                "payload": p.payload,
                "ballots": p.ballots,
                "state": p.state.value,
            }
        if path == "/gov/members":
            return {
                "members": [
                    {"member_id": m.member_id, "status": m.status.value}
                    for m in self.state.governance.members.values()
                ]
            }
        if path == "/gov/service":
            svc = self.state.governance.service
            return {
                "phase": svc.phase.value,
                "service_identity": svc.service_identity.hex(),
                "trusted_measurements": sorted(d.hex() for d in svc.trusted_measurements),
                "constitution_version": self.state.governance.constitution.version,
            }
        if path == "/app/balance":
            party_id = body.get("party_id", "")
            self._authorize_read(signer, path, body, sig_hex, {party_id})
            return {"party_id": party_id, "balance": settlement.holding(self.state.settlement, party_id)}
        if path == "/app/claims":
            intermediary_id = body.get("intermediary_id", "")
            self._authorize_read(signer, path, body, sig_hex, {intermediary_id})
            return {
                "intermediary_id": intermediary_id,
                "total": settlement.claims_total(self.state.settlement, intermediary_id),
            }
        if path == "/app/asset":
            asset = self.state.settlement.assets.get(body.get("asset_id", ""))
            if asset is None:
                raise NotFoundError("no such asset")
            allowed = {asset.issuer} | set(asset.holdings)
            self._authorize_read(signer, path, body, sig_hex, allowed)
            return {"asset_id": asset.asset_id, "issuer": asset.issuer, "holdings": asset.holdings}
        if path == "/app/entry":
            return self._read_app_entry(body, signer, sig_hex)
        raise NotFoundError(f"unknown read path {path!r}")

    def _authorize_read(self, signer: str, path: str, body: dict, sig_hex: str, allowed: set[str]) -> None:
        """Private-class reads need an authorized party signature; node
        operators hold no party key and are always refused. The
        plain-mode baseline serves reads openly."""
        if not self.confidential:
            return
        cb = next(
            (p.party_id for p in self.state.settlement.parties.values()
             if p.role == PartyRole.CENTRAL_BANK),
            None,
        )
        if cb:
            allowed = allowed | {cb}
        if signer not in allowed:
            raise AuthorizationError(f"signer {signer!r} may not read this data")
        self._verify_party(signer, path, body, sig_hex)

    def _read_app_entry(self, body: dict, signer: str, sig_hex: str) -> dict:
        try:
            seqno = int(body.get("seqno", -1))
        except (TypeError, ValueError) as exc:
            raise ValidationError("seqno must be an integer") from exc
        entry = self.ledger.entry(seqno)
        if entry.kind != EntryKind.APP:
            raise NotFoundError("not an application entry")
        payload = self.ledger.decrypt_payload(entry, self.data_key)
        envelope = json.loads(payload.decode())
        inner = envelope.get("body", {})
        involved = {
            v
            for k, v in inner.items()
            if k in ("from", "to", "seller", "buyer", "party_id", "client_id", "initial_holder")
            and isinstance(v, str)
        }
        involved.add(envelope.get("signer", ""))
        if entry.privacy == Privacy.PRIVATE:
            self._authorize_read(signer, "/app/entry", body, sig_hex, involved)
        return {"seqno": seqno, "envelope": envelope, "privacy": entry.privacy.name.title()}


def _err(code: str, message: str, detail: dict | None = None) -> dict:
    return {"error": {"code": code, "message": message, "detail": detail or {}}}
