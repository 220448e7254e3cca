"""Emulated trusted execution environment.

NOT SECURE: platform keys live in ordinary process memory and exist so the
admission and sealing protocols can be exercised end to end on a desk. The
trust boundary is modeled, not enforced by hardware.

A node's code identity is the SHA-256 measurement of its code blob (the
configuration-declared application policy bytes plus a build-id string).
The emulated platform signs quotes binding a node key to a measurement and
derives sealing keys from a platform secret and a measurement, so sealed
data opens only on the same platform running the same code.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from . import crypto
from .codec import Reader, Writer

QUOTE_SIGN_DOMAIN = b"ccl.quote.v1\0"
SEAL_INFO = b"ccl.seal.v1"


@dataclass(frozen=True, slots=True)
class Measurement:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != crypto.DIGEST_LEN:
            raise ValueError("measurement must be a 32-byte digest")

    @property
    def hex(self) -> str:
        return self.digest.hex()


@dataclass(frozen=True, slots=True)
class AttestationQuote:
    measurement: Measurement
    node_identity: bytes  # public key of the attested node
    platform_id: str
    signature: bytes  # by the platform key over measurement | node_identity


@dataclass(frozen=True, slots=True)
class SealedBlob:
    measurement: Measurement
    nonce: bytes
    ciphertext: bytes


class RejectReason(str, Enum):
    UNKNOWN_PLATFORM = "UnknownPlatform"
    UNTRUSTED_CODE = "UntrustedCode"
    BAD_SIGNATURE = "BadSignature"


@dataclass(frozen=True, slots=True)
class QuoteVerdict:
    accepted: bool
    reason: RejectReason | None = None

    @classmethod
    def accept(cls) -> "QuoteVerdict":
        return cls(True)

    @classmethod
    def reject(cls, reason: RejectReason) -> "QuoteVerdict":
        return cls(False, reason)


def measure(code_blob: bytes) -> Measurement:
    return Measurement(crypto.sha256(code_blob))


class EmulatedPlatform:
    """Software stand-in for a TEE platform: one signing key, one secret."""

    def __init__(self, platform_id: str, signing_seed: bytes, secret: bytes):
        self.platform_id = platform_id
        self._signer = crypto.SigningKey(signing_seed)
        self._secret = secret

    @classmethod
    def generate(cls, platform_id: str) -> "EmulatedPlatform":
        return cls(
            platform_id,
            crypto.SigningKey.generate().seed,
            crypto.random_bytes(crypto.KEY_LEN),
        )

    @property
    def verify_key(self) -> bytes:
        return self._signer.public_bytes

    def to_secret_json(self) -> dict:
        return {
            "platform_id": self.platform_id,
            "signing_seed": self._signer.seed.hex(),
            "secret": self._secret.hex(),
        }

    @classmethod
    def from_secret_json(cls, doc: dict) -> "EmulatedPlatform":
        return cls(
            doc["platform_id"],
            bytes.fromhex(doc["signing_seed"]),
            bytes.fromhex(doc["secret"]),
        )

    def quote(self, measurement: Measurement, node_identity: bytes) -> AttestationQuote:
        message = QUOTE_SIGN_DOMAIN + measurement.digest + node_identity
        return AttestationQuote(
            measurement, node_identity, self.platform_id, self._signer.sign(message)
        )

    def _sealing_key(self, measurement: Measurement) -> bytes:
        return crypto.derive_key(self._secret + measurement.digest, SEAL_INFO)

    def seal(self, data: bytes, measurement: Measurement) -> SealedBlob:
        nonce = crypto.random_bytes(crypto.NONCE_LEN)
        ciphertext = crypto.aead_encrypt(
            self._sealing_key(measurement), nonce, data, measurement.digest
        )
        return SealedBlob(measurement, nonce, ciphertext)

    def unseal(self, blob: SealedBlob, measurement: Measurement) -> bytes:
        """Raises ValueError unless measurement and platform secret match."""
        return crypto.aead_decrypt(
            self._sealing_key(measurement), blob.nonce, blob.ciphertext, measurement.digest
        )


def verify_quote(
    quote: AttestationQuote,
    trusted_measurements: set[bytes] | frozenset[bytes],
    trusted_platform_keys: dict[str, bytes],
) -> QuoteVerdict:
    """Accept iff the platform is trusted, its signature checks out, and the
    measured code is on the trusted list."""
    key = trusted_platform_keys.get(quote.platform_id)
    if key is None:
        return QuoteVerdict.reject(RejectReason.UNKNOWN_PLATFORM)
    message = QUOTE_SIGN_DOMAIN + quote.measurement.digest + quote.node_identity
    if not crypto.verify_signature(key, quote.signature, message):
        return QuoteVerdict.reject(RejectReason.BAD_SIGNATURE)
    if quote.measurement.digest not in trusted_measurements:
        return QuoteVerdict.reject(RejectReason.UNTRUSTED_CODE)
    return QuoteVerdict.accept()


# -- canonical encodings (stable: quotes ride in join requests) -------------


def encode_quote(quote: AttestationQuote) -> bytes:
    w = (
        Writer()
        .raw(quote.measurement.digest)
        .blob(quote.node_identity)
        .blob(quote.platform_id.encode("utf-8"))
        .blob(quote.signature)
    )
    return w.getvalue()


def decode_quote(buf: bytes) -> AttestationQuote:
    r = Reader(buf)
    measurement = Measurement(r.raw(crypto.DIGEST_LEN))
    node_identity = r.blob()
    platform_id = r.blob().decode("utf-8")
    signature = r.blob()
    r.expect_end()
    return AttestationQuote(measurement, node_identity, platform_id, signature)


def encode_sealed_blob(blob: SealedBlob) -> bytes:
    w = Writer().raw(blob.measurement.digest).blob(blob.nonce).blob(blob.ciphertext)
    return w.getvalue()


def decode_sealed_blob(buf: bytes) -> SealedBlob:
    r = Reader(buf)
    measurement = Measurement(r.raw(crypto.DIGEST_LEN))
    nonce = r.blob()
    ciphertext = r.blob()
    r.expect_end()
    return SealedBlob(measurement, nonce, ciphertext)
