"""Persistent Raft state: current term, vote, and the command log.

Durability contract: the node flushes storage before sending messages.
``MemoryRaftStorage`` backs the simulator (the object survives simulated
crashes, standing in for disk). ``FileRaftStorage`` keeps a JSON state
file, rewritten atomically, and a framed log file

    [u32 length][u64 term | u32+command]

appended in place; truncation rewrites the log, which is rare and cheap at
desk scale (no compaction).
"""

from __future__ import annotations

import json
import os
from pathlib import Path

from ..codec import Reader, Writer, frame, read_frame
from ..errors import CodecError, LedgerIOError
from .raft import LogRecord


class MemoryRaftStorage:
    def __init__(self):
        self.term = 0
        self.voted_for: str | None = None
        self.records: list[LogRecord] = []

    def load(self) -> tuple[int, str | None, list[LogRecord]]:
        return self.term, self.voted_for, [LogRecord(r.term, r.command) for r in self.records]

    def set_state(self, term: int, voted_for: str | None) -> None:
        self.term = term
        self.voted_for = voted_for

    def append_records(self, start: int, records: list[LogRecord]) -> None:
        assert start == len(self.records), "log append out of order"
        self.records.extend(LogRecord(r.term, r.command) for r in records)

    def truncate(self, count: int) -> None:
        del self.records[count:]

    def flush(self) -> None:
        pass


def _encode_record(record: LogRecord) -> bytes:
    return Writer().u64(record.term).blob(record.command).getvalue()


def _decode_record(buf: bytes) -> LogRecord:
    r = Reader(buf)
    term = r.u64()
    command = r.blob()
    r.expect_end()
    return LogRecord(term, command)


class FileRaftStorage:
    def __init__(self, directory: str | Path):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.state_path = self.dir / "raft_state.json"
        self.log_path = self.dir / "raft_log.bin"
        self._fh = open(self.log_path, "ab")
        self._count = self._count_records()

    def _count_records(self) -> int:
        if not self.log_path.exists():
            return 0
        buf = self.log_path.read_bytes()
        n, offset = 0, 0
        while offset < len(buf):
            try:
                _, offset = read_frame(buf, offset)
            except CodecError:
                # partial trailing frame from a crash mid-write: drop it
                self._fh.close()
                with open(self.log_path, "r+b") as fh:
                    fh.truncate(offset)
                self._fh = open(self.log_path, "ab")
                break
            n += 1
        return n

    def load(self) -> tuple[int, str | None, list[LogRecord]]:
        term, voted_for = 0, None
        if self.state_path.exists():
            doc = json.loads(self.state_path.read_text())
            term, voted_for = doc["term"], doc["voted_for"]
        records = []
        buf = self.log_path.read_bytes()
        offset = 0
        while offset < len(buf):
            try:
                body, offset = read_frame(buf, offset)
                records.append(_decode_record(body))
            except CodecError as exc:
                raise LedgerIOError(f"corrupt raft log: {exc}") from exc
        self._count = len(records)
        return term, voted_for, records

    def set_state(self, term: int, voted_for: str | None) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        tmp.write_text(json.dumps({"term": term, "voted_for": voted_for}))
        os.replace(tmp, self.state_path)

    def append_records(self, start: int, records: list[LogRecord]) -> None:
        assert start == self._count, "log append out of order"
        for record in records:
            self._fh.write(frame(_encode_record(record)))
        self._count += len(records)

    def truncate(self, count: int) -> None:
        if count >= self._count:
            return
        buf = self.log_path.read_bytes()
        offset = 0
        for _ in range(count):
            _, offset = read_frame(buf, offset)
        self._fh.close()
        with open(self.log_path, "r+b") as fh:
            fh.truncate(offset)
        self._fh = open(self.log_path, "ab")
        self._count = count

    def flush(self) -> None:
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()
