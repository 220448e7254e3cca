"""Constitution-driven consortium governance.

The constitution is declarative policy, versioned and stored on the ledger:
structural validation rules per action, a threshold resolution rule over
member ballots, and a fixed effect table. Members (identities registered
on the ledger) propose and vote; operators run nodes and never appear in
ballots. Every piece of governance state is a pure function of the applied
event sequence, so replaying the ledger reproduces it exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

from . import crypto, enclave
from .errors import (
    AuthenticationError,
    AuthorizationError,
    NotFoundError,
    StateError,
    ValidationError,
)

MEMBER_SIGN_DOMAIN = b"ccl.member.v1\0"

ACTIONS = (
    "AddMember",
    "RetireMember",
    "AddTrustedMeasurement",
    "RemoveTrustedMeasurement",
    "TransitionServiceToOpen",
    "SetConstitution",
    "RegisterAppPolicy",
)

# field kind -> checker; constitutions reference these by name
_FIELD_KINDS = {
    "id": lambda v: isinstance(v, str) and 0 < len(v) <= 128,
    "hex32": lambda v: isinstance(v, str)
    and len(v) == 64
    and all(c in "0123456789abcdef" for c in v),
    "json": lambda v: v is not None,
}

DEFAULT_VALIDATE_RULES = {
    "AddMember": {"member_id": "id", "public_key": "hex32"},
    "RetireMember": {"member_id": "id"},
    "AddTrustedMeasurement": {"digest": "hex32"},
    "RemoveTrustedMeasurement": {"digest": "hex32"},
    "TransitionServiceToOpen": {},
    "SetConstitution": {"constitution": "json"},
    "RegisterAppPolicy": {"policy_id": "id", "policy": "json"},
}

DEFAULT_RESOLVE_RULE = {"kind": "strict_majority", "quorum_fraction": 0.0}


class MemberStatus(str, Enum):
    ACTIVE = "Active"
    RETIRED = "Retired"


class ProposalState(str, Enum):
    PENDING = "Pending"
    ACCEPTED = "Accepted"
    REJECTED = "Rejected"
    APPLIED = "Applied"


class ServicePhase(str, Enum):
    OPENING = "Opening"
    OPEN = "Open"


@dataclass
class Constitution:
    version: int
    validate_rules: dict[str, dict[str, str]]
    resolve_rule: dict

    @classmethod
    def initial(cls) -> "Constitution":
        return cls(1, dict(DEFAULT_VALIDATE_RULES), dict(DEFAULT_RESOLVE_RULE))

    def to_doc(self) -> dict:
        return {
            "version": self.version,
            "validate_rules": self.validate_rules,
            "resolve_rule": self.resolve_rule,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Constitution":
        try:
            return cls(int(doc["version"]), doc["validate_rules"], doc["resolve_rule"])
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad constitution document: {exc}", "constitution") from exc


@dataclass
class Member:
    member_id: str
    public_key: bytes
    status: MemberStatus = MemberStatus.ACTIVE


@dataclass
class Proposal:
    proposal_id: str
    proposer: str
    action: str
    payload: dict
    ballots: dict[str, str] = field(default_factory=dict)  # member -> "Yes"/"No"
    state: ProposalState = ProposalState.PENDING
    reason: str = ""


@dataclass
class ServiceStatus:
    phase: ServicePhase = ServicePhase.OPENING
    service_identity: bytes = b""
    trusted_measurements: set[bytes] = field(default_factory=set)
    trusted_platforms: dict[str, bytes] = field(default_factory=dict)
    allowed_join_node_ids: set[str] = field(default_factory=set)  # plain-mode admission


@dataclass
class GovernanceState:
    constitution: Constitution = field(default_factory=Constitution.initial)
    members: dict[str, Member] = field(default_factory=dict)
    proposals: dict[str, Proposal] = field(default_factory=dict)
    service: ServiceStatus = field(default_factory=ServiceStatus)
    app_policies: dict[str, dict] = field(default_factory=dict)
    next_proposal_seq: int = 1
    initialized: bool = False

    def active_members(self) -> list[Member]:
        return [m for m in self.members.values() if m.status == MemberStatus.ACTIVE]

    def to_doc(self) -> dict:
        """Canonical snapshot used for replay-equivalence comparison."""
        return {
            "constitution": self.constitution.to_doc(),
            "members": {
                m.member_id: {"public_key": m.public_key.hex(), "status": m.status.value}
                for m in self.members.values()
            },
            "proposals": {
                p.proposal_id: {
                    "proposer": p.proposer,
                    "action": p.action,
                    "payload": p.payload,
                    "ballots": dict(sorted(p.ballots.items())),
                    "state": p.state.value,
                    "reason": p.reason,
                }
                for p in self.proposals.values()
            },
            "service": {
                "phase": self.service.phase.value,
                "service_identity": self.service.service_identity.hex(),
                "trusted_measurements": sorted(
                    d.hex() for d in self.service.trusted_measurements
                ),
                "trusted_platforms": {
                    k: v.hex() for k, v in sorted(self.service.trusted_platforms.items())
                },
                "allowed_join_node_ids": sorted(self.service.allowed_join_node_ids),
            },
            "app_policies": self.app_policies,
            "next_proposal_seq": self.next_proposal_seq,
        }


def member_signing_message(action: str, payload: dict) -> bytes:
    from .codec import canonical_json_bytes

    return MEMBER_SIGN_DOMAIN + canonical_json_bytes({"action": action, "payload": payload})


def ballot_signing_message(proposal_id: str, ballot: str) -> bytes:
    from .codec import canonical_json_bytes

    return MEMBER_SIGN_DOMAIN + canonical_json_bytes(
        {"ballot": ballot, "proposal_id": proposal_id}
    )


def authenticate_member(state: GovernanceState, member_id: str, message: bytes, signature: bytes) -> Member:
    member = state.members.get(member_id)
    if member is None or member.status != MemberStatus.ACTIVE:
        raise AuthorizationError(f"member {member_id!r} is not an active member")
    if not crypto.verify_signature(member.public_key, signature, message):
        raise AuthenticationError(f"bad signature from member {member_id!r}")
    return member


def validate_action(constitution: Constitution, action: str, payload: dict) -> None:
    """Structural validation per the constitution's rules; raises with the
    failing rule id."""
    if action not in ACTIONS:
        raise ValidationError(f"unknown action {action!r}", rule_id="action.known")
    rules = constitution.validate_rules.get(action, {})
    if not isinstance(payload, dict):
        raise ValidationError("payload must be an object", rule_id=f"{action}.payload")
    for fname, kind in rules.items():
        checker = _FIELD_KINDS.get(kind)
        rule_id = f"{action}.{fname}:{kind}"
        if checker is None:
            raise ValidationError(f"constitution references unknown kind {kind}", rule_id=rule_id)
        if fname not in payload or not checker(payload[fname]):
            raise ValidationError(f"field {fname!r} fails rule {kind}", rule_id=rule_id)
    if action == "SetConstitution":
        new = Constitution.from_doc(payload["constitution"])
        if new.version != constitution.version + 1:
            raise ValidationError(
                f"constitution version must be {constitution.version + 1}, got {new.version}",
                rule_id="SetConstitution.version",
            )


def submit_proposal(state: GovernanceState, member_id: str, action: str, payload: dict) -> Proposal:
    """Record a Pending proposal (caller has already authenticated the member)."""
    validate_action(state.constitution, action, payload)
    pid = f"p{state.next_proposal_seq:05d}"
    state.next_proposal_seq += 1
    proposal = Proposal(pid, member_id, action, payload)
    state.proposals[pid] = proposal
    return proposal


def resolve(state: GovernanceState, proposal: Proposal) -> ProposalState:
    """Evaluate the constitution's resolution rule over recorded ballots."""
    rule = state.constitution.resolve_rule
    if rule.get("kind") != "strict_majority":
        raise StateError(f"unsupported resolve rule {rule!r}")
    active = {m.member_id for m in state.active_members()}
    votes = {m: b for m, b in proposal.ballots.items() if m in active}
    quorum = math.ceil(rule.get("quorum_fraction", 0.0) * len(active))
    if len(votes) < quorum:
        return ProposalState.PENDING
    yes = sum(1 for b in votes.values() if b == "Yes")
    needed = len(active) // 2 + 1
    if yes >= needed:
        return ProposalState.ACCEPTED
    # every member yet to vote saying Yes still would not reach the threshold
    if yes + (len(active) - len(votes)) < needed:
        return ProposalState.REJECTED
    return ProposalState.PENDING


def vote(state: GovernanceState, member_id: str, proposal_id: str, ballot: str) -> tuple[Proposal, list[dict]]:
    """Record a ballot; on acceptance apply the effects in the same step.

    Returns the proposal and the list of effect records (empty while the
    proposal stays pending). Re-votes replace the member's prior ballot.
    """
    proposal = state.proposals.get(proposal_id)
    if proposal is None:
        raise NotFoundError(f"no proposal {proposal_id!r}")
    if proposal.state != ProposalState.PENDING:
        raise StateError(f"proposal {proposal_id} already {proposal.state.value}")
    if ballot not in ("Yes", "No"):
        raise ValidationError("ballot must be Yes or No", rule_id="ballot.value")
    proposal.ballots[member_id] = ballot
    outcome = resolve(state, proposal)
    if outcome == ProposalState.REJECTED:
        proposal.state = ProposalState.REJECTED
        proposal.reason = "resolution cannot reach a strict majority"
        return proposal, []
    if outcome == ProposalState.ACCEPTED:
        effects = apply_effects(state, proposal)
        return proposal, effects
    return proposal, []


def apply_effects(state: GovernanceState, proposal: Proposal) -> list[dict]:
    """Fixed per-action effect table; runs atomically with the accepting vote."""
    action, p = proposal.action, proposal.payload
    effects: list[dict] = []

    def effect(**kv):
        effects.append(kv)

    if action == "AddMember":
        state.members[p["member_id"]] = Member(
            p["member_id"], bytes.fromhex(p["public_key"]), MemberStatus.ACTIVE
        )
        effect(type="member_added", member_id=p["member_id"])
    elif action == "RetireMember":
        member = state.members.get(p["member_id"])
        if member is None:
            proposal.state = ProposalState.REJECTED
            proposal.reason = "member vanished before application"
            return [{"type": "noop", "reason": proposal.reason}]
        member.status = MemberStatus.RETIRED
        effect(type="member_retired", member_id=p["member_id"])
    elif action == "AddTrustedMeasurement":
        state.service.trusted_measurements.add(bytes.fromhex(p["digest"]))
        effect(type="measurement_trusted", digest=p["digest"])
    elif action == "RemoveTrustedMeasurement":
        state.service.trusted_measurements.discard(bytes.fromhex(p["digest"]))
        effect(type="measurement_removed", digest=p["digest"])
    elif action == "TransitionServiceToOpen":
        opened = open_service(state)
        effect(type="service_open", already_open=not opened)
    elif action == "SetConstitution":
        new = Constitution.from_doc(p["constitution"])
        if new.version != state.constitution.version + 1:
            proposal.state = ProposalState.REJECTED
            proposal.reason = "constitution version conflict at application time"
            return [{"type": "noop", "reason": proposal.reason}]
        state.constitution = new
        effect(type="constitution_set", version=new.version)
    elif action == "RegisterAppPolicy":
        state.app_policies[p["policy_id"]] = p["policy"]
        effect(type="app_policy_registered", policy_id=p["policy_id"])
    else:
        raise StateError(f"no effect defined for action {action!r}")

    proposal.state = ProposalState.APPLIED
    return effects


def open_service(state: GovernanceState) -> bool:
    """Opening -> Open transition; returns False (warning) when already Open."""
    if state.service.phase == ServicePhase.OPEN:
        return False
    state.service.phase = ServicePhase.OPEN
    return True


def process_join_request(
    state: GovernanceState,
    quote: enclave.AttestationQuote,
) -> enclave.QuoteVerdict:
    """Admission gate for confidential mode: quote must verify under a
    trusted platform key and carry a governance-trusted measurement."""
    return enclave.verify_quote(
        quote, state.service.trusted_measurements, state.service.trusted_platforms
    )


def genesis(
    state: GovernanceState,
    constitution_doc: dict,
    members: list[dict],
    service_identity: bytes,
    trusted_measurements: list[bytes],
    trusted_platforms: dict[str, bytes],
    allowed_join_node_ids: list[str],
) -> None:
    if state.initialized:
        raise StateError("governance already initialized")
    state.constitution = Constitution.from_doc(constitution_doc)
    if state.constitution.version != 1:
        raise ValidationError("genesis constitution must be version 1", "genesis.version")
    for m in members:
        state.members[m["id"]] = Member(m["id"], bytes.fromhex(m["public_key"]))
    state.service = ServiceStatus(
        phase=ServicePhase.OPENING,
        service_identity=service_identity,
        trusted_measurements=set(trusted_measurements),
        trusted_platforms=dict(trusted_platforms),
        allowed_join_node_ids=set(allowed_join_node_ids),
    )
    state.initialized = True
