"""Ledger, Merkle proofs, receipts, and chain verification.

Independent oracles live here: a brute-force tree rebuild (recursive
pairing, no shared code with the incremental accumulator beyond the node
hash), a byte-scan over raw files for privacy, and corruption injection
for tamper evidence.
"""

import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ccledger import crypto
from ccledger.codec import read_frame
from ccledger.errors import (
    CodecError,
    ConfigError,
    LedgerIOError,
    NotFoundError,
    NotYetSignedError,
)
from ccledger.ledger import (
    EntryKind,
    Ledger,
    Privacy,
    Receipt,
    decode_entry,
    decode_receipt,
    encode_receipt,
    entry_digest,
    merkle_proof,
    merkle_root,
    node_hash,
    verify_chain,
    verify_receipt,
)


# --- independent oracles ------------------------------------------------


def oracle_tree_root(leaves):
    """Level-by-level rebuild, duplicating the last node of odd levels."""
    assert leaves
    level = list(leaves)
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level), 2):
            left = level[i]
            right = level[i + 1] if i + 1 < len(level) else level[i]
            nxt.append(node_hash(left, right))
        level = nxt
    return level[0]


def oracle_replay_path(leaf, path):
    current = leaf
    for side, sibling in path:
        current = node_hash(current, sibling) if side == 1 else node_hash(sibling, current)
    return current


def frame_body_spans(file_bytes):
    """(start, end) byte spans of each entry's body, excluding the length
    prefixes, parsed straight off the raw file."""
    spans = []
    offset = 0
    while offset < len(file_bytes):
        body, nxt = read_frame(file_bytes, offset)
        spans.append((offset + 4, nxt))
        offset = nxt
    return spans


def make_ledger(tmp_path, service_key, data_key=None, n=0, interval=10, name="l.bin"):
    lg = Ledger(
        tmp_path / name,
        service_signer=service_key,
        data_key=data_key,
        signature_interval=interval,
        create=True,
    )
    for i in range(n):
        lg.append(EntryKind.APP, Privacy.PUBLIC, f"payload-{i}".encode())
    return lg


# --- merkle ----------------------------------------------------------------


@given(st.integers(1, 200))
@settings(max_examples=40, deadline=None)
def test_incremental_root_matches_oracle(n):
    leaves = [crypto.sha256(bytes([i % 256]) + i.to_bytes(4, "little")) for i in range(n)]
    assert merkle_root(leaves) == oracle_tree_root(leaves)


def test_proof_lengths():
    import math

    for n in range(1, 70):
        leaves = [crypto.sha256(i.to_bytes(4, "little")) for i in range(n)]
        want = 0 if n == 1 else math.ceil(math.log2(n))
        for idx in range(n):
            assert len(merkle_proof(leaves, idx)) == want


def test_proofs_replay_to_oracle_root_exhaustive_to_64():
    for n in range(1, 65):
        leaves = [crypto.sha256(i.to_bytes(4, "little") + bytes([n])) for i in range(n)]
        root = oracle_tree_root(leaves)
        for idx in range(n):
            path = merkle_proof(leaves, idx)
            assert oracle_replay_path(leaves[idx], path) == root


# --- append ------------------------------------------------------------------


def test_append_to_empty_gives_seqno_zero(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key)
    seqno, root = lg.append(EntryKind.APP, Privacy.PUBLIC, b"first")
    assert seqno == 0
    assert root == lg.entry(0).digest  # single leaf: root is the entry digest


def test_identical_payloads_get_distinct_digests(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key)
    lg.append(EntryKind.APP, Privacy.PUBLIC, b"same")
    lg.append(EntryKind.APP, Privacy.PUBLIC, b"same")
    assert lg.entry(0).digest != lg.entry(1).digest


def test_private_payload_not_on_disk(tmp_path, service_key, data_key):
    lg = make_ledger(tmp_path, service_key, data_key)
    lg.append(EntryKind.APP, Privacy.PRIVATE, b"contains SECRET-73 marker")
    lg.flush()
    raw = (tmp_path / "l.bin").read_bytes()
    assert b"SECRET-73" not in raw
    assert lg.decrypt_payload(lg.entry(0)) == b"contains SECRET-73 marker"


def test_private_append_without_key_is_config_error(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key)
    with pytest.raises(ConfigError):
        lg.append(EntryKind.APP, Privacy.PRIVATE, b"x")


def test_private_sentinel_never_leaks(tmp_path, service_key, data_key):
    rng = random.Random(7)
    sentinel = bytes(rng.randrange(256) for _ in range(16))
    lg = make_ledger(tmp_path, service_key, data_key)
    for i in range(40):
        filler = bytes(rng.randrange(256) for _ in range(rng.randrange(5, 60)))
        lg.append(EntryKind.APP, Privacy.PRIVATE, filler + sentinel + filler)
    lg.flush()
    assert sentinel not in (tmp_path / "l.bin").read_bytes()


def test_deterministic_files_for_identical_sequences(tmp_path, service_key, data_key):
    for name in ("a.bin", "b.bin"):
        lg = make_ledger(tmp_path, service_key, data_key, name=name)
        for i in range(25):
            privacy = Privacy.PRIVATE if i % 3 == 0 else Privacy.PUBLIC
            lg.append(EntryKind.APP, privacy, f"tx-{i}".encode())
        lg.sign_root()
        lg.flush()
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()


def test_signature_cadence_every_k_appends(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=10, interval=10)
    # ten appends then one automatic signature covering them
    assert lg.count == 11
    assert lg.entry(10).kind == EntryKind.SIGNATURE
    assert lg.signed_coverage == 10


def test_create_refuses_existing_file(tmp_path, service_key):
    make_ledger(tmp_path, service_key).flush()
    with pytest.raises(ConfigError):
        Ledger(tmp_path / "l.bin", service_signer=service_key, create=True)


def test_reload_matches_state(tmp_path, service_key, data_key):
    lg = make_ledger(tmp_path, service_key, data_key, n=23)
    lg.sign_root()
    lg.flush()
    again = Ledger(tmp_path / "l.bin", service_signer=service_key, data_key=data_key)
    assert again.count == lg.count
    assert again.signed_coverage == lg.signed_coverage
    assert [e.digest for e in again.entries()] == [e.digest for e in lg.entries()]


# --- receipts -----------------------------------------------------------------


def test_single_entry_receipt(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=1)
    lg.sign_root()
    receipt = lg.get_receipt(0)
    assert receipt.proof_path == ()
    assert receipt.root == lg.entry(0).digest
    assert verify_receipt(receipt, service_key.public_bytes)


def test_four_entry_receipts_have_depth_two(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=4)
    lg.sign_root()
    for seqno in range(4):
        receipt = lg.get_receipt(seqno)
        assert len(receipt.proof_path) == 2
        assert verify_receipt(receipt, service_key.public_bytes)


def test_five_entry_receipt_matches_full_rebuild(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=5)
    lg.sign_root()
    receipt = lg.get_receipt(4)
    digests = [lg.entry(i).digest for i in range(5)]
    assert oracle_replay_path(receipt.entry_digest, receipt.proof_path) == oracle_tree_root(digests)
    assert receipt.root == oracle_tree_root(digests)
    assert verify_receipt(receipt, service_key.public_bytes)


def test_inclusion_exhaustive_up_to_64(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, interval=None)
    for n in range(64):
        lg.append(EntryKind.APP, Privacy.PUBLIC, f"e{n}".encode())
        lg.sign_root()
    for seqno in range(64):
        assert verify_receipt(lg.get_receipt(seqno), service_key.public_bytes)


def test_receipt_requires_signed_coverage(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=3, interval=None)
    with pytest.raises(NotYetSignedError):
        lg.get_receipt(0)
    lg.sign_root()
    lg.append(EntryKind.APP, Privacy.PUBLIC, b"tail")
    lg.get_receipt(2)
    with pytest.raises(NotYetSignedError):
        lg.get_receipt(4)  # the fresh tail is not yet covered
    with pytest.raises(NotFoundError):
        lg.get_receipt(99)


def test_receipt_serialization_roundtrip(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=7)
    lg.sign_root()
    receipt = lg.get_receipt(3)
    assert decode_receipt(encode_receipt(receipt)) == receipt


def test_flipped_digest_bit_fails(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=6)
    lg.sign_root()
    receipt = lg.get_receipt(2)
    bad = bytearray(receipt.entry_digest)
    bad[0] ^= 0x01
    forged = Receipt(
        receipt.seqno, bytes(bad), receipt.proof_path, receipt.root,
        receipt.root_signature, receipt.service_identity,
    )
    assert not verify_receipt(forged, service_key.public_bytes)


def test_receipt_rejects_wrong_trusted_identity(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=2)
    lg.sign_root()
    other = crypto.SigningKey.generate()
    assert not verify_receipt(lg.get_receipt(0), other.public_bytes)


def _receipt_field_spans(receipt):
    """Byte spans of each field inside the canonical receipt encoding."""
    spans = {}
    pos = 0
    spans["magic"] = (pos, pos + 4); pos += 4
    spans["version"] = (pos, pos + 1); pos += 1
    spans["seqno"] = (pos, pos + 8); pos += 8
    spans["entry_digest"] = (pos, pos + 32); pos += 32
    spans["path_len"] = (pos, pos + 4); pos += 4
    start = pos
    pos += 33 * len(receipt.proof_path)
    spans["proof_path"] = (start, pos)
    spans["root"] = (pos, pos + 32); pos += 32
    spans["sig_len"] = (pos, pos + 4); pos += 4
    spans["root_signature"] = (pos, pos + 64); pos += 64
    spans["id_len"] = (pos, pos + 4); pos += 4
    spans["service_identity"] = (pos, pos + 32); pos += 32
    return spans, pos


PROTECTED_FIELDS = {"entry_digest", "proof_path", "root", "root_signature", "service_identity"}


def test_single_byte_mutations_never_verify(tmp_path, service_key):
    """Every single-byte corruption touching digest/path/signature fields
    must fail verification or parsing. Exhaustive over offsets, sampled
    over replacement values; the acceptance suite runs the full 255."""
    lg = make_ledger(tmp_path, service_key, n=5)
    lg.sign_root()
    receipt = lg.get_receipt(4)  # odd tree: includes a duplicate-promoted step
    blob = encode_receipt(receipt)
    spans, total = _receipt_field_spans(receipt)
    assert total == len(blob)
    rng = random.Random(99)

    def field_of(offset):
        return next(name for name, (a, b) in spans.items() if a <= offset < b)

    for offset in range(len(blob)):
        values = {blob[offset] ^ (1 << b) for b in range(8)}
        values |= {rng.randrange(256) for _ in range(4)}
        values.discard(blob[offset])
        for value in values:
            mutated = bytearray(blob)
            mutated[offset] = value
            try:
                candidate = decode_receipt(bytes(mutated))
            except CodecError:
                continue
            ok = verify_receipt(candidate, service_key.public_bytes)
            if field_of(offset) in PROTECTED_FIELDS:
                assert not ok, f"mutation at {offset} ({field_of(offset)}) slipped through"


# --- verify_chain ---------------------------------------------------------------


def test_chain_ok_on_honest_ledger(tmp_path, service_key, data_key):
    lg = make_ledger(tmp_path, service_key, data_key, n=200)
    lg.flush()
    assert verify_chain(tmp_path / "l.bin", service_key.public_bytes).ok


def test_chain_detects_payload_flip_at_exact_seqno(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=500)
    lg.flush()
    raw = bytearray((tmp_path / "l.bin").read_bytes())
    spans = frame_body_spans(bytes(raw))
    target = 417
    start, end = spans[target]
    raw[start + 10] ^= 0x40
    corrupted = tmp_path / "c.bin"
    corrupted.write_bytes(bytes(raw))
    verdict = verify_chain(corrupted, service_key.public_bytes)
    assert not verdict.ok and verdict.first_bad_seqno == 417


def test_chain_truncation_reports_last_good(tmp_path, service_key):
    lg = make_ledger(tmp_path, service_key, n=30)
    lg.flush()
    raw = (tmp_path / "l.bin").read_bytes()
    spans = frame_body_spans(raw)
    cut = spans[20][0] + 3  # inside entry 20's body
    trunc = tmp_path / "t.bin"
    trunc.write_bytes(raw[:cut])
    with pytest.raises(LedgerIOError) as err:
        verify_chain(trunc, service_key.public_bytes)
    assert err.value.last_good_seqno == 19


def test_chain_unreadable_file(tmp_path, service_key):
    with pytest.raises(LedgerIOError):
        verify_chain(tmp_path / "absent.bin", service_key.public_bytes)


def test_chain_detects_every_entry_region_bit_small_ledger(tmp_path, service_key):
    """Exhaustive single-bit tamper evidence over a small ledger."""
    lg = make_ledger(tmp_path, service_key, n=8, interval=4)
    lg.flush()
    raw = (tmp_path / "l.bin").read_bytes()
    spans = frame_body_spans(raw)
    scratch = tmp_path / "x.bin"
    for start, end in spans:
        for offset in range(start, end):
            for bit in range(8):
                mutated = bytearray(raw)
                mutated[offset] ^= 1 << bit
                scratch.write_bytes(bytes(mutated))
                try:
                    verdict = verify_chain(scratch, service_key.public_bytes)
                except LedgerIOError:
                    continue
                assert not verdict.ok


def test_chain_random_bit_flips_detected_at_correct_seqno(tmp_path, service_key, data_key):
    lg = make_ledger(tmp_path, service_key, data_key, n=300)
    lg.flush()
    raw = (tmp_path / "l.bin").read_bytes()
    spans = frame_body_spans(raw)
    rng = random.Random(123)
    scratch = tmp_path / "x.bin"
    for _ in range(60):
        target = rng.randrange(len(spans))
        start, end = spans[target]
        offset = rng.randrange(start, end)
        mutated = bytearray(raw)
        mutated[offset] ^= 1 << rng.randrange(8)
        scratch.write_bytes(bytes(mutated))
        verdict = verify_chain(scratch, service_key.public_bytes)
        assert not verdict.ok and verdict.first_bad_seqno == target


def test_decode_entry_rejects_bad_enum():
    good = bytes.fromhex("00")  # deliberately nonsense
    with pytest.raises(CodecError):
        decode_entry(good)
