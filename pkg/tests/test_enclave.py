import itertools
import random

import pytest

from ccledger import crypto
from ccledger.enclave import (
    AttestationQuote,
    EmulatedPlatform,
    Measurement,
    RejectReason,
    decode_quote,
    decode_sealed_blob,
    encode_quote,
    encode_sealed_blob,
    measure,
    verify_quote,
)


@pytest.fixture
def platform():
    return EmulatedPlatform.generate("emu-a")


def test_measure_empty_blob_is_fixed():
    assert measure(b"").digest == crypto.sha256(b"")


def test_measure_deterministic():
    assert measure(b"policy-bytes v1") == measure(b"policy-bytes v1")


def test_measure_mutation_trials_no_collisions():
    rng = random.Random(4)
    base = bytes(rng.randrange(256) for _ in range(256))
    seen = {measure(base).digest}
    for _ in range(1000):
        mutated = bytearray(base)
        mutated[rng.randrange(len(base))] ^= 1 + rng.randrange(255)
        digest = measure(bytes(mutated)).digest
        assert digest not in seen or bytes(mutated) == base
        seen.add(digest)


def test_quote_roundtrip_accepts(platform):
    m = measure(b"code")
    node = crypto.SigningKey.generate().public_bytes
    quote = platform.quote(m, node)
    verdict = verify_quote(quote, {m.digest}, {platform.platform_id: platform.verify_key})
    assert verdict.accepted


def test_quote_rejected_under_other_platform_key(platform):
    other = EmulatedPlatform.generate("emu-a")  # same id, different key
    m = measure(b"code")
    quote = platform.quote(m, b"\x01" * 32)
    verdict = verify_quote(quote, {m.digest}, {"emu-a": other.verify_key})
    assert not verdict.accepted and verdict.reason == RejectReason.BAD_SIGNATURE


def test_quote_node_identity_swap_rejected(platform):
    m = measure(b"code")
    quote = platform.quote(m, b"\x01" * 32)
    swapped = AttestationQuote(quote.measurement, b"\x02" * 32, quote.platform_id, quote.signature)
    verdict = verify_quote(swapped, {m.digest}, {platform.platform_id: platform.verify_key})
    assert not verdict.accepted and verdict.reason == RejectReason.BAD_SIGNATURE


def test_quote_untrusted_measurement(platform):
    quote = platform.quote(measure(b"rogue"), b"\x01" * 32)
    verdict = verify_quote(
        quote, {measure(b"legit").digest}, {platform.platform_id: platform.verify_key}
    )
    assert verdict.reason == RejectReason.UNTRUSTED_CODE


def test_quote_unknown_platform(platform):
    quote = platform.quote(measure(b"code"), b"\x01" * 32)
    verdict = verify_quote(quote, {measure(b"code").digest}, {"emu-b": platform.verify_key})
    assert verdict.reason == RejectReason.UNKNOWN_PLATFORM


def test_second_trusted_platform_accepts():
    a = EmulatedPlatform.generate("emu-a")
    b = EmulatedPlatform.generate("emu-b")
    m = measure(b"shared code")
    trusted = {"emu-a": a.verify_key, "emu-b": b.verify_key}
    quote = b.quote(m, b"\x03" * 32)
    assert verify_quote(quote, {m.digest}, trusted).accepted


def test_admission_soundness_exhaustive_subsets(platform):
    """A measurement outside the trusted set never gains Accept, for every
    trust-list subset of four candidate measurements."""
    candidates = [measure(bytes([i]) * 4) for i in range(4)]
    outsider = measure(b"not in any list")
    keys = {platform.platform_id: platform.verify_key}
    for r in range(5):
        for subset in itertools.combinations(candidates, r):
            trusted = {m.digest for m in subset}
            assert not verify_quote(platform.quote(outsider, b"\x04" * 32), trusted, keys).accepted
            for m in subset:
                assert verify_quote(platform.quote(m, b"\x04" * 32), trusted, keys).accepted


# --- sealing ---------------------------------------------------------------


def test_seal_unseal_roundtrip(platform):
    m = measure(b"app")
    blob = platform.seal(b"secret payload", m)
    assert platform.unseal(blob, m) == b"secret payload"


def test_seal_binding_truth_table():
    p1, p2 = EmulatedPlatform.generate("p1"), EmulatedPlatform.generate("p2")
    m1, m2 = measure(b"code-1"), measure(b"code-2")
    blob = p1.seal(b"data", m1)
    assert p1.unseal(blob, m1) == b"data"  # (same platform, same measurement)
    with pytest.raises(ValueError):
        p1.unseal(blob, m2)  # (same platform, other measurement)
    with pytest.raises(ValueError):
        p2.unseal(blob, m1)  # (other platform, same measurement)
    with pytest.raises(ValueError):
        p2.unseal(blob, m2)  # (other platform, other measurement)


def test_unseal_rejects_every_ciphertext_bitflip(platform):
    m = measure(b"app")
    blob = platform.seal(bytes(range(64)), m)
    for offset in range(len(blob.ciphertext)):
        for bit in range(8):
            mutated = bytearray(blob.ciphertext)
            mutated[offset] ^= 1 << bit
            forged = type(blob)(blob.measurement, blob.nonce, bytes(mutated))
            with pytest.raises(ValueError):
                platform.unseal(forged, m)


# --- encodings ---------------------------------------------------------------


def test_quote_encoding_roundtrip(platform):
    quote = platform.quote(measure(b"code"), b"\x07" * 32)
    assert decode_quote(encode_quote(quote)) == quote


def test_sealed_blob_encoding_roundtrip(platform):
    blob = platform.seal(b"x" * 20, measure(b"code"))
    assert decode_sealed_blob(encode_sealed_blob(blob)) == blob


def test_platform_secret_json_roundtrip(platform):
    clone = EmulatedPlatform.from_secret_json(platform.to_secret_json())
    m = measure(b"z")
    assert clone.unseal(platform.seal(b"q", m), m) == b"q"
    assert clone.verify_key == platform.verify_key
