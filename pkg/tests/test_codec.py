import pytest
from hypothesis import given
from hypothesis import strategies as st

from ccledger.codec import (
    Reader,
    Writer,
    canonical_json_bytes,
    decode_json_bytes,
    frame,
    read_frame,
)
from ccledger.errors import CodecError


@given(st.integers(0, 255), st.integers(0, 2**32 - 1), st.integers(0, 2**64 - 1), st.binary(max_size=200))
def test_writer_reader_roundtrip(a, b, c, blob):
    buf = Writer().u8(a).u32(b).u64(c).blob(blob).getvalue()
    r = Reader(buf)
    assert (r.u8(), r.u32(), r.u64(), r.blob()) == (a, b, c, blob)
    r.expect_end()


def test_reader_rejects_truncation():
    buf = Writer().u32(5).getvalue()
    r = Reader(buf + b"ab")  # announces 5 payload bytes, provides 2
    with pytest.raises(CodecError):
        r.blob()


def test_reader_rejects_trailing_bytes():
    r = Reader(b"\x01\x02")
    r.u8()
    with pytest.raises(CodecError):
        r.expect_end()


def test_reader_rejects_absurd_length():
    r = Reader(Writer().u32(1 << 30).getvalue() + b"x")
    with pytest.raises(CodecError):
        r.blob()


@given(st.binary(max_size=300))
def test_frame_roundtrip(data):
    body, nxt = read_frame(frame(data), 0)
    assert body == data and nxt == len(data) + 4


def test_frame_truncated():
    buf = frame(b"hello")[:-2]
    with pytest.raises(CodecError):
        read_frame(buf, 0)


def test_canonical_json_is_stable():
    a = canonical_json_bytes({"b": 1, "a": [1, 2, {"z": 0, "y": None}]})
    b = canonical_json_bytes({"a": [1, 2, {"y": None, "z": 0}], "b": 1})
    assert a == b
    assert b" " not in a
    assert decode_json_bytes(a) == {"a": [1, 2, {"y": None, "z": 0}], "b": 1}


def test_canonical_json_rejects_non_json():
    with pytest.raises(CodecError):
        canonical_json_bytes({"x": object()})
