"""Append-only Merkle ledger with signed roots and offline receipts.

File format: a sequence of frames ``[u32 length][entry bytes]`` (little
endian). Entry bytes are the canonical encoding

    u8 kind | u8 privacy | u32+payload | u64 seqno | 32-byte digest

where ``digest = SHA-256("ccl.entry.v1\\0" | kind | privacy | u32+payload |
seqno)``. Private payloads are stored as AES-256-GCM ciphertext under the
service data key with a seqno-derived nonce, so identical append sequences
with identical keys produce byte-identical files.

The Merkle tree is binary over entry digests with duplicate-last-node
promotion for odd levels; interior nodes hash ``0x01 | left | right``.
Roots are signed into Signature entries covering every entry before them,
every ``signature_interval`` appends and on demand. A Receipt carries the
inclusion path from one entry digest to one signed root and verifies fully
offline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

from . import crypto
from .codec import Reader, Writer, frame, read_frame
from .errors import (
    CodecError,
    ConfigError,
    LedgerIOError,
    NotFoundError,
    NotYetSignedError,
)

ENTRY_DOMAIN = b"ccl.entry.v1\0"
ROOT_SIGN_DOMAIN = b"ccl.root.v1\0"
NODE_PREFIX = b"\x01"
RECEIPT_MAGIC = b"CCLR"
RECEIPT_VERSION = 1
MAX_PROOF_LEN = 64

SIDE_L = 0
SIDE_R = 1

DEFAULT_SIGNATURE_INTERVAL = 10


class EntryKind(IntEnum):
    GOVERNANCE = 0
    APP = 1
    SIGNATURE = 2


class Privacy(IntEnum):
    PUBLIC = 0
    PRIVATE = 1


@dataclass(frozen=True, slots=True)
class LedgerEntry:
    seqno: int
    kind: EntryKind
    privacy: Privacy
    payload: bytes  # ciphertext when privacy is PRIVATE
    digest: bytes


@dataclass(frozen=True, slots=True)
class Receipt:
    seqno: int
    entry_digest: bytes
    proof_path: tuple[tuple[int, bytes], ...]  # (side, sibling_digest)
    root: bytes
    root_signature: bytes
    service_identity: bytes


@dataclass(frozen=True, slots=True)
class ChainVerdict:
    ok: bool
    first_bad_seqno: int | None = None

    @classmethod
    def good(cls) -> "ChainVerdict":
        return cls(True, None)

    @classmethod
    def bad(cls, seqno: int) -> "ChainVerdict":
        return cls(False, seqno)


def entry_digest(kind: int, privacy: int, payload: bytes, seqno: int) -> bytes:
    w = Writer().raw(ENTRY_DOMAIN).u8(kind).u8(privacy).blob(payload).u64(seqno)
    return crypto.sha256(w.getvalue())


def encode_entry(entry: LedgerEntry) -> bytes:
    w = (
        Writer()
        .u8(entry.kind)
        .u8(entry.privacy)
        .blob(entry.payload)
        .u64(entry.seqno)
        .raw(entry.digest)
    )
    return w.getvalue()


def decode_entry(buf: bytes) -> LedgerEntry:
    r = Reader(buf)
    kind = r.u8()
    privacy = r.u8()
    payload = r.blob()
    seqno = r.u64()
    digest = r.raw(crypto.DIGEST_LEN)
    r.expect_end()
    try:
        return LedgerEntry(seqno, EntryKind(kind), Privacy(privacy), payload, digest)
    except ValueError as exc:
        raise CodecError(str(exc)) from exc


def node_hash(left: bytes, right: bytes) -> bytes:
    return crypto.sha256(NODE_PREFIX + left + right)


def _payload_nonce(seqno: int) -> bytes:
    return struct.pack("<4sQ", b"payl", seqno)


def _payload_aad(kind: int, privacy: int, seqno: int) -> bytes:
    return Writer().u8(kind).u8(privacy).u64(seqno).getvalue()


class MerkleAccumulator:
    """Incremental tree: O(log n) append, O(1) root, full levels retained."""

    def __init__(self):
        self.levels: list[list[bytes]] = [[]]

    def __len__(self) -> int:
        return len(self.levels[0])

    def append(self, leaf: bytes) -> None:
        self.levels[0].append(leaf)
        level = 0
        while len(self.levels[level]) > 1:
            nodes = self.levels[level]
            parent_idx = (len(nodes) - 1) // 2
            left = nodes[2 * parent_idx]
            right = nodes[2 * parent_idx + 1] if 2 * parent_idx + 1 < len(nodes) else left
            digest = node_hash(left, right)
            if level + 1 == len(self.levels):
                self.levels.append([])
            parents = self.levels[level + 1]
            if parent_idx == len(parents):
                parents.append(digest)
            else:
                parents[parent_idx] = digest
            level += 1

    def root(self) -> bytes:
        if not self.levels[0]:
            raise ValueError("empty tree has no root")
        return self.levels[-1][0]


def merkle_root(leaves: list[bytes]) -> bytes:
    acc = MerkleAccumulator()
    for leaf in leaves:
        acc.append(leaf)
    return acc.root()


def merkle_proof(leaves: list[bytes], index: int) -> tuple[tuple[int, bytes], ...]:
    """Inclusion path for ``leaves[index]``; ceil(log2(n)) steps, 0 for n=1."""
    if not 0 <= index < len(leaves):
        raise IndexError(index)
    acc = MerkleAccumulator()
    for leaf in leaves:
        acc.append(leaf)
    path: list[tuple[int, bytes]] = []
    idx = index
    for nodes in acc.levels:
        if len(nodes) <= 1:
            break
        if idx % 2 == 0:
            sib = idx + 1 if idx + 1 < len(nodes) else idx
            path.append((SIDE_R, nodes[sib]))
        else:
            path.append((SIDE_L, nodes[idx - 1]))
        idx //= 2
    return tuple(path)


def encode_receipt(receipt: Receipt) -> bytes:
    w = (
        Writer()
        .raw(RECEIPT_MAGIC)
        .u8(RECEIPT_VERSION)
        .u64(receipt.seqno)
        .raw(receipt.entry_digest)
        .u32(len(receipt.proof_path))
    )
    for side, sibling in receipt.proof_path:
        w.u8(side).raw(sibling)
    w.raw(receipt.root).blob(receipt.root_signature).blob(receipt.service_identity)
    return w.getvalue()


def decode_receipt(buf: bytes) -> Receipt:
    r = Reader(buf)
    if r.raw(4) != RECEIPT_MAGIC:
        raise CodecError("bad receipt magic")
    if r.u8() != RECEIPT_VERSION:
        raise CodecError("unsupported receipt version")
    seqno = r.u64()
    digest = r.raw(crypto.DIGEST_LEN)
    n = r.u32()
    if n > MAX_PROOF_LEN:
        raise CodecError("proof too long")
    path = []
    for _ in range(n):
        side = r.u8()
        if side not in (SIDE_L, SIDE_R):
            raise CodecError("bad path side")
        path.append((side, r.raw(crypto.DIGEST_LEN)))
    root = r.raw(crypto.DIGEST_LEN)
    signature = r.blob()
    identity = r.blob()
    r.expect_end()
    return Receipt(seqno, digest, tuple(path), root, signature, identity)


def verify_receipt(receipt: Receipt, trusted_service_identity: bytes) -> bool:
    """Fully offline check: path replay, root signature, service identity.

    Path sides must match the parity chain of the seqno (even index pairs
    with a right sibling, odd with a left one); this pins every byte of the
    path, including sides on duplicate-promoted nodes where left and right
    hash identically.
    """
    try:
        if receipt.seqno < 0 or len(receipt.entry_digest) != crypto.DIGEST_LEN:
            return False
        if len(receipt.root) != crypto.DIGEST_LEN:
            return False
        if len(receipt.proof_path) > MAX_PROOF_LEN:
            return False
        if receipt.seqno >= (1 << len(receipt.proof_path)):
            return False  # tree of this depth cannot contain the seqno
        current = receipt.entry_digest
        idx = receipt.seqno
        for side, sibling in receipt.proof_path:
            if len(sibling) != crypto.DIGEST_LEN:
                return False
            expected_side = SIDE_R if idx % 2 == 0 else SIDE_L
            if side != expected_side:
                return False
            if side == SIDE_R:
                current = node_hash(current, sibling)
            else:
                current = node_hash(sibling, current)
            idx //= 2
        if current != receipt.root:
            return False
        if receipt.service_identity != trusted_service_identity:
            return False
        return crypto.verify_signature(
            receipt.service_identity,
            receipt.root_signature,
            ROOT_SIGN_DOMAIN + receipt.root,
        )
    except Exception:
        return False


def encode_signature_payload(covered_count: int, root: bytes, signature: bytes) -> bytes:
    return Writer().u64(covered_count).raw(root).blob(signature).getvalue()


def decode_signature_payload(buf: bytes) -> tuple[int, bytes, bytes]:
    r = Reader(buf)
    covered = r.u64()
    root = r.raw(crypto.DIGEST_LEN)
    signature = r.blob()
    r.expect_end()
    return covered, root, signature


class Ledger:
    """Single-writer append-only ledger bound to one file.

    Only the post-consensus applier appends; readers may hold the object
    concurrently against the committed prefix. ``service_signer`` is needed
    to emit signature entries, ``service_identity`` alone suffices for
    producing receipts from existing signatures.
    """

    def __init__(
        self,
        path: str | Path,
        *,
        service_signer: crypto.SigningKey | None = None,
        service_identity: bytes | None = None,
        data_key: bytes | None = None,
        signature_interval: int | None = DEFAULT_SIGNATURE_INTERVAL,
        create: bool = False,
    ):
        self.path = Path(path)
        self._signer = service_signer
        self.service_identity = (
            service_signer.public_bytes if service_signer else service_identity
        )
        self._data_key = data_key
        self.signature_interval = signature_interval
        self._entries: list[LedgerEntry] = []
        self._digests: list[bytes] = []
        self._acc = MerkleAccumulator()
        # (position, covered_count, root, signature) per Signature entry
        self._signatures: list[tuple[int, int, bytes, bytes]] = []
        self._since_signature = 0

        if create:
            if self.path.exists():
                raise ConfigError(f"ledger already exists: {self.path}", "ledger_path")
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "ab")
        else:
            if not self.path.exists():
                raise LedgerIOError(f"no ledger at {self.path}")
            self._load()
            self._fh = open(self.path, "ab")

    def _load(self) -> None:
        buf = self.path.read_bytes()
        offset = 0
        while offset < len(buf):
            try:
                body, offset = read_frame(buf, offset)
                entry = decode_entry(body)
            except CodecError as exc:
                raise LedgerIOError(
                    f"truncated or corrupt ledger: {exc}",
                    last_good_seqno=len(self._entries) - 1,
                ) from exc
            self._index_entry(entry)

    def _index_entry(self, entry: LedgerEntry) -> None:
        self._entries.append(entry)
        self._digests.append(entry.digest)
        self._acc.append(entry.digest)
        if entry.kind == EntryKind.SIGNATURE:
            covered, root, sig = decode_signature_payload(entry.payload)
            self._signatures.append((entry.seqno, covered, root, sig))
            self._since_signature = 0
        else:
            self._since_signature += 1

    # -- write path -----------------------------------------------------

    def append(
        self,
        kind: EntryKind,
        privacy: Privacy,
        payload_plaintext: bytes,
        data_key: bytes | None = None,
    ) -> tuple[int, bytes]:
        """Append one entry; returns (seqno, new merkle root)."""
        seqno = len(self._entries)
        if privacy == Privacy.PRIVATE:
            key = data_key or self._data_key
            if key is None:
                raise ConfigError("private append requires a data key", "data_key")
            stored = crypto.aead_encrypt(
                key,
                _payload_nonce(seqno),
                payload_plaintext,
                _payload_aad(kind, privacy, seqno),
            )
        else:
            stored = payload_plaintext
        entry = LedgerEntry(
            seqno, kind, privacy, stored, entry_digest(kind, privacy, stored, seqno)
        )
        self._write(entry)
        if (
            kind != EntryKind.SIGNATURE
            and self.signature_interval
            and self._signer is not None
            and self._since_signature >= self.signature_interval
        ):
            self.sign_root()
        return seqno, self._acc.root()

    def _write(self, entry: LedgerEntry) -> None:
        try:
            self._fh.write(frame(encode_entry(entry)))
            self._fh.flush()
        except OSError as exc:
            raise LedgerIOError(
                f"append failed: {exc}", last_good_seqno=len(self._entries) - 1
            ) from exc
        self._index_entry(entry)

    def sign_root(self) -> int | None:
        """Append a Signature entry covering all current entries.

        Returns the new entry's seqno, or None when there is nothing new to
        cover. Requires the service signing key.
        """
        if self._signer is None:
            raise ConfigError("ledger opened without the service signing key")
        covered = len(self._entries)
        if covered == 0:
            return None
        if self._signatures and self._signatures[-1][0] == covered - 1:
            return None  # latest entry is already a signature over the rest
        root = self._acc.root()
        signature = self._signer.sign(ROOT_SIGN_DOMAIN + root)
        payload = encode_signature_payload(covered, root, signature)
        entry = LedgerEntry(
            covered,
            EntryKind.SIGNATURE,
            Privacy.PUBLIC,
            payload,
            entry_digest(EntryKind.SIGNATURE, Privacy.PUBLIC, payload, covered),
        )
        self._write(entry)
        return entry.seqno

    def flush(self, sync: bool = False) -> None:
        self._fh.flush()
        if sync:
            import os

            os.fsync(self._fh.fileno())

    def close(self) -> None:
        self._fh.close()

    # -- read path ------------------------------------------------------

    @property
    def count(self) -> int:
        return len(self._entries)

    @property
    def signed_coverage(self) -> int:
        """Number of leading entries covered by some signed root."""
        return max((s[1] for s in self._signatures), default=0)

    def entry(self, seqno: int) -> LedgerEntry:
        if not 0 <= seqno < len(self._entries):
            raise NotFoundError(f"no entry {seqno}")
        return self._entries[seqno]

    def entries(self) -> list[LedgerEntry]:
        return list(self._entries)

    def decrypt_payload(self, entry: LedgerEntry, data_key: bytes | None = None) -> bytes:
        if entry.privacy != Privacy.PRIVATE:
            return entry.payload
        key = data_key or self._data_key
        if key is None:
            raise ConfigError("no data key to decrypt private payload", "data_key")
        return crypto.aead_decrypt(
            key,
            _payload_nonce(entry.seqno),
            entry.payload,
            _payload_aad(entry.kind, entry.privacy, entry.seqno),
        )

    def get_receipt(self, seqno: int) -> Receipt:
        if not 0 <= seqno < len(self._entries):
            raise NotFoundError(f"no entry {seqno}")
        if self.service_identity is None:
            raise ConfigError("ledger opened without a service identity")
        covering = next((s for s in self._signatures if s[1] > seqno), None)
        if covering is None:
            raise NotYetSignedError(f"entry {seqno} not yet covered by a signed root")
        _, covered, root, signature = covering
        path = merkle_proof(self._digests[:covered], seqno)
        return Receipt(
            seqno, self._digests[seqno], path, root, signature, self.service_identity
        )


def verify_chain(
    ledger_file: str | Path, trusted_service_identity: bytes
) -> ChainVerdict:
    """Recompute every digest and every signed root from the raw file.

    Needs no key material beyond the trusted service public key; private
    payloads are verified as opaque ciphertext. Raises LedgerIOError for
    framing damage (truncation), carrying the last fully decoded seqno.
    """
    try:
        buf = Path(ledger_file).read_bytes()
    except OSError as exc:
        raise LedgerIOError(f"unreadable ledger: {exc}") from exc

    acc = MerkleAccumulator()
    offset = 0
    position = 0
    while offset < len(buf):
        try:
            body, offset = read_frame(buf, offset)
        except CodecError as exc:
            raise LedgerIOError(
                f"truncated ledger: {exc}", last_good_seqno=position - 1
            ) from exc
        try:
            entry = decode_entry(body)
        except CodecError:
            return ChainVerdict.bad(position)
        if entry.seqno != position:
            return ChainVerdict.bad(position)
        recomputed = entry_digest(entry.kind, entry.privacy, entry.payload, entry.seqno)
        if recomputed != entry.digest:
            return ChainVerdict.bad(position)
        if entry.kind == EntryKind.SIGNATURE:
            try:
                covered, root, signature = decode_signature_payload(entry.payload)
            except CodecError:
                return ChainVerdict.bad(position)
            if covered != position or position == 0:
                return ChainVerdict.bad(position)
            if root != acc.root():
                return ChainVerdict.bad(position)
            if not crypto.verify_signature(
                trusted_service_identity, signature, ROOT_SIGN_DOMAIN + root
            ):
                return ChainVerdict.bad(position)
        acc.append(entry.digest)
        position += 1
    return ChainVerdict.good()
