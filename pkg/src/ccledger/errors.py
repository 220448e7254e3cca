"""Exception hierarchy shared across the package.

Every error carries a short machine-readable ``code`` so the RPC layer and
the CLI can emit structured JSON failures without string matching.
"""

from __future__ import annotations


class CclError(Exception):
    code = "internal"

    def __init__(self, message: str = "", **detail):
        super().__init__(message or self.__class__.__name__)
        self.message = message
        self.detail = detail

    def to_json(self) -> dict:
        return {"code": self.code, "message": self.message, "detail": self.detail}


class CodecError(CclError):
    """Malformed canonical encoding (truncated field, bad tag, bad length)."""

    code = "codec"


class ConfigError(CclError):
    code = "config"

    def __init__(self, message: str, field_path: str = ""):
        super().__init__(message, field_path=field_path)
        self.field_path = field_path


class LedgerIOError(CclError):
    """Ledger file unreadable or truncated; ``last_good_seqno`` is the last
    entry that decoded completely (-1 when none did)."""

    code = "ledger_io"

    def __init__(self, message: str, last_good_seqno: int = -1):
        super().__init__(message, last_good_seqno=last_good_seqno)
        self.last_good_seqno = last_good_seqno


class NotYetSignedError(CclError):
    code = "not_yet_signed"


class NotFoundError(CclError):
    code = "not_found"


class NotLeaderError(CclError):
    code = "not_leader"

    def __init__(self, message: str = "not the leader", leader_hint: str | None = None):
        super().__init__(message, leader_hint=leader_hint)
        self.leader_hint = leader_hint


class AuthenticationError(CclError):
    code = "authentication"


class AuthorizationError(CclError):
    code = "authorization"


class ValidationError(CclError):
    code = "validation"

    def __init__(self, message: str, rule_id: str = ""):
        super().__init__(message, rule_id=rule_id)
        self.rule_id = rule_id


class StateError(CclError):
    code = "state"


class ServiceNotOpenError(StateError):
    code = "service_not_open"


class FundsError(CclError):
    code = "insufficient_funds"


class BackingError(CclError):
    code = "backing_violation"


class AssetError(CclError):
    code = "insufficient_asset"


# RPC status mapping, loosely HTTP-shaped so clients can branch on ranges.
STATUS_BY_CODE = {
    "codec": 400,
    "config": 400,
    "validation": 400,
    "authentication": 401,
    "authorization": 403,
    "not_found": 404,
    "state": 409,
    "service_not_open": 409,
    "insufficient_funds": 409,
    "backing_violation": 409,
    "insufficient_asset": 409,
    "not_yet_signed": 409,
    "not_leader": 421,
    "ledger_io": 500,
    "internal": 500,
}


def status_for(err: CclError) -> int:
    return STATUS_BY_CODE.get(err.code, 500)
