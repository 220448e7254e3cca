"""Cryptographic primitives, named once here.

Algorithm choices for the whole service:

* hash: SHA-256 (32-byte digests everywhere)
* signatures: Ed25519 (deterministic, 64-byte signatures, 32-byte keys)
* authenticated encryption: AES-256-GCM
* key agreement for wrapping secrets in transit: X25519 + HKDF-SHA256

Everything is a thin wrapper over the ``cryptography`` package so the rest
of the code never touches hazmat types directly.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.hashes import SHA256
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

DIGEST_LEN = 32
SIGNATURE_LEN = 64
KEY_LEN = 32
NONCE_LEN = 12


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def random_bytes(n: int) -> bytes:
    return os.urandom(n)


@dataclass(frozen=True)
class SigningKey:
    """Ed25519 signing key, addressed by its 32-byte seed."""

    seed: bytes

    @classmethod
    def generate(cls) -> "SigningKey":
        key = Ed25519PrivateKey.generate()
        seed = key.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption())
        return cls(seed)

    def _key(self) -> Ed25519PrivateKey:
        return Ed25519PrivateKey.from_private_bytes(self.seed)

    @property
    def public_bytes(self) -> bytes:
        return self._key().public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)

    def sign(self, message: bytes) -> bytes:
        return self._key().sign(message)


def verify_signature(public_key: bytes, signature: bytes, message: bytes) -> bool:
    """True iff ``signature`` is a valid Ed25519 signature; never raises."""
    if len(public_key) != KEY_LEN or len(signature) != SIGNATURE_LEN:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


def aead_encrypt(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    return AESGCM(key).encrypt(nonce, plaintext, aad)


def aead_decrypt(key: bytes, nonce: bytes, ciphertext: bytes, aad: bytes = b"") -> bytes:
    """Raises ValueError on authentication failure."""
    try:
        return AESGCM(key).decrypt(nonce, ciphertext, aad)
    except InvalidTag as exc:
        raise ValueError("authentication failure") from exc


def derive_key(secret: bytes, info: bytes) -> bytes:
    return HKDF(algorithm=SHA256(), length=KEY_LEN, salt=None, info=info).derive(secret)


# --- secret wrapping over an untrusted channel -------------------------------
#
# Sender encrypts to the recipient's X25519 public key using an ephemeral
# key pair; output carries the ephemeral public key and a random nonce.

_WRAP_INFO = b"ccl.wrap.v1"


def kx_generate() -> tuple[bytes, bytes]:
    """Returns (private_bytes, public_bytes) for an X25519 key pair."""
    priv = X25519PrivateKey.generate()
    return (
        priv.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()),
        priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw),
    )


def wrap_secret(recipient_kx_public: bytes, plaintext: bytes) -> dict:
    eph_priv = X25519PrivateKey.generate()
    eph_pub = eph_priv.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
    shared = eph_priv.exchange(X25519PublicKey.from_public_bytes(recipient_kx_public))
    key = derive_key(shared, _WRAP_INFO)
    nonce = random_bytes(NONCE_LEN)
    return {
        "ephemeral_public": eph_pub.hex(),
        "nonce": nonce.hex(),
        "ciphertext": aead_encrypt(key, nonce, plaintext).hex(),
    }


def unwrap_secret(recipient_kx_private: bytes, wrapped: dict) -> bytes:
    priv = X25519PrivateKey.from_private_bytes(recipient_kx_private)
    shared = priv.exchange(
        X25519PublicKey.from_public_bytes(bytes.fromhex(wrapped["ephemeral_public"]))
    )
    key = derive_key(shared, _WRAP_INFO)
    return aead_decrypt(
        key, bytes.fromhex(wrapped["nonce"]), bytes.fromhex(wrapped["ciphertext"])
    )
