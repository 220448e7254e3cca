"""Canonical byte encodings.

One fixed encoding is shared by the ledger file, receipts, quotes, sealed
blobs, and the node wire format: little-endian fixed-width integers and
u32-length-prefixed byte strings, fields in a fixed documented order.
JSON bodies are canonicalised with sorted keys and compact separators so
signatures over them are reproducible across processes.
"""

from __future__ import annotations

import json
import struct
from typing import Any

from .errors import CodecError

U8 = struct.Struct("<B")
U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")

MAX_FIELD_LEN = 1 << 26  # 64 MiB cap, rejects absurd length prefixes early


class Writer:
    __slots__ = ("_parts",)

    def __init__(self):
        self._parts: list[bytes] = []

    def u8(self, value: int) -> "Writer":
        self._parts.append(U8.pack(value))
        return self

    def u32(self, value: int) -> "Writer":
        self._parts.append(U32.pack(value))
        return self

    def u64(self, value: int) -> "Writer":
        self._parts.append(U64.pack(value))
        return self

    def raw(self, data: bytes) -> "Writer":
        self._parts.append(data)
        return self

    def blob(self, data: bytes) -> "Writer":
        """u32 length prefix followed by the raw bytes."""
        self._parts.append(U32.pack(len(data)))
        self._parts.append(data)
        return self

    def getvalue(self) -> bytes:
        return b"".join(self._parts)


class Reader:
    __slots__ = ("_buf", "_pos")

    def __init__(self, buf: bytes):
        self._buf = buf
        self._pos = 0

    def _take(self, n: int) -> bytes:
        end = self._pos + n
        if end > len(self._buf):
            raise CodecError(f"truncated: need {n} bytes at offset {self._pos}")
        out = self._buf[self._pos:end]
        self._pos = end
        return out

    def u8(self) -> int:
        return U8.unpack(self._take(1))[0]

    def u32(self) -> int:
        return U32.unpack(self._take(4))[0]

    def u64(self) -> int:
        return U64.unpack(self._take(8))[0]

    def raw(self, n: int) -> bytes:
        return self._take(n)

    def blob(self) -> bytes:
        n = self.u32()
        if n > MAX_FIELD_LEN:
            raise CodecError(f"field length {n} exceeds cap")
        return self._take(n)

    def expect_end(self) -> None:
        if self._pos != len(self._buf):
            raise CodecError(f"{len(self._buf) - self._pos} trailing bytes")

    @property
    def remaining(self) -> int:
        return len(self._buf) - self._pos


def canonical_json_bytes(obj: Any) -> bytes:
    """Deterministic JSON: sorted keys, no whitespace, UTF-8."""
    try:
        return json.dumps(
            obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False
        ).encode("utf-8")
    except (TypeError, ValueError) as exc:
        raise CodecError(f"not JSON-encodable: {exc}") from exc


def decode_json_bytes(data: bytes) -> Any:
    try:
        return json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodecError(f"bad JSON body: {exc}") from exc


def frame(data: bytes) -> bytes:
    """`[u32 length][bytes]` frame used by the ledger file and the wire."""
    return U32.pack(len(data)) + data


def read_frame(buf: bytes, offset: int) -> tuple[bytes, int]:
    """Decode one frame at ``offset``; returns (payload, next_offset)."""
    if offset + 4 > len(buf):
        raise CodecError("truncated frame header")
    (n,) = U32.unpack_from(buf, offset)
    if n > MAX_FIELD_LEN:
        raise CodecError(f"frame length {n} exceeds cap")
    end = offset + 4 + n
    if end > len(buf):
        raise CodecError("truncated frame body")
    return buf[offset + 4:end], end
