"""Raft replication core.

A single-threaded state machine driven from outside: ``tick`` with a
logical clock, ``handle`` with one incoming message, ``propose`` with a
command. All three return messages to send; the caller owns transport and
must flush persistent state before sending them (the storage object
buffers until ``flush``).

Conventions: log positions are 0-based; ``commit_index`` and
``last_applied`` are counts of entries (so ``commit_index <= len(log)``
always holds). ``prev_log_index`` of -1 means "appending from the start".
Standard Raft, no pre-vote and no joint consensus; leaders append a no-op
record on election so the current-term commit rule makes progress without
client traffic. Election timeouts are drawn uniformly from
[ELECTION_TICKS_MIN, ELECTION_TICKS_MAX]; heartbeats fire every
HEARTBEAT_TICKS.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum

from ..errors import NotLeaderError

ELECTION_TICKS_MIN = 10
ELECTION_TICKS_MAX = 20
HEARTBEAT_TICKS = 2
MAX_BATCH = 500


class Role(Enum):
    FOLLOWER = "Follower"
    CANDIDATE = "Candidate"
    LEADER = "Leader"


@dataclass(slots=True)
class LogRecord:
    term: int
    command: bytes


@dataclass(slots=True)
class Message:
    frm: str = ""
    to: str = ""
    term: int = 0


@dataclass(slots=True)
class RequestVote(Message):
    candidate_id: str = ""
    last_log_index: int = -1
    last_log_term: int = 0


@dataclass(slots=True)
class RequestVoteReply(Message):
    granted: bool = False


@dataclass(slots=True)
class AppendEntries(Message):
    leader_id: str = ""
    prev_log_index: int = -1
    prev_log_term: int = 0
    entries: list[LogRecord] = field(default_factory=list)
    leader_commit: int = 0


@dataclass(slots=True)
class AppendEntriesReply(Message):
    success: bool = False
    match_count: int = 0
    hint: int = 0  # follower log length / conflict position for fast backup


_KIND_BY_TYPE = {
    RequestVote: "RequestVote",
    RequestVoteReply: "RequestVoteReply",
    AppendEntries: "AppendEntries",
    AppendEntriesReply: "AppendEntriesReply",
}
_TYPE_BY_KIND = {v: k for k, v in _KIND_BY_TYPE.items()}


def encode_message(msg: Message) -> dict:
    out: dict = {"kind": _KIND_BY_TYPE[type(msg)], "frm": msg.frm, "to": msg.to, "term": msg.term}
    if isinstance(msg, RequestVote):
        out.update(
            candidate_id=msg.candidate_id,
            last_log_index=msg.last_log_index,
            last_log_term=msg.last_log_term,
        )
    elif isinstance(msg, RequestVoteReply):
        out.update(granted=msg.granted)
    elif isinstance(msg, AppendEntries):
        out.update(
            leader_id=msg.leader_id,
            prev_log_index=msg.prev_log_index,
            prev_log_term=msg.prev_log_term,
            entries=[[r.term, r.command.hex()] for r in msg.entries],
            leader_commit=msg.leader_commit,
        )
    elif isinstance(msg, AppendEntriesReply):
        out.update(success=msg.success, match_count=msg.match_count, hint=msg.hint)
    return out


def decode_message(doc: dict) -> Message:
    kind = _TYPE_BY_KIND[doc["kind"]]
    args = {k: v for k, v in doc.items() if k != "kind"}
    if kind is AppendEntries:
        args["entries"] = [LogRecord(t, bytes.fromhex(c)) for t, c in args["entries"]]
    return kind(**args)


class RaftNode:
    """One replica. ``peers`` includes this node's own id."""

    def __init__(
        self,
        node_id: str,
        peers: set[str],
        storage,
        rng: random.Random | None = None,
        now: int = 0,
    ):
        self.node_id = node_id
        self.peers: set[str] = set(peers)
        self.storage = storage
        self.rng = rng or random.Random()

        term, voted_for, log = storage.load()
        self.current_term: int = term
        self.voted_for: str | None = voted_for
        self.log: list[LogRecord] = log

        self.role = Role.FOLLOWER
        self.commit_index = 0
        self.last_applied = 0
        self.last_known_leader: str | None = None

        self.next_index: dict[str, int] = {}
        self.match_count: dict[str, int] = {}
        self.votes: set[str] = set()

        self._last_reset = now
        self._timeout = self._new_timeout()
        self._last_heartbeat = now - HEARTBEAT_TICKS

    # -- helpers ----------------------------------------------------------

    def _new_timeout(self) -> int:
        return self.rng.randint(ELECTION_TICKS_MIN, ELECTION_TICKS_MAX)

    def _others(self) -> list[str]:
        return sorted(p for p in self.peers if p != self.node_id)

    def _majority(self) -> int:
        return len(self.peers) // 2 + 1

    def _last_log_term(self) -> int:
        return self.log[-1].term if self.log else 0

    def _persist_state(self) -> None:
        self.storage.set_state(self.current_term, self.voted_for)

    def _reset_timer(self, now: int) -> None:
        self._last_reset = now
        self._timeout = self._new_timeout()

    def _step_down(self, term: int, now: int) -> None:
        if term > self.current_term:
            self.current_term = term
            self.voted_for = None
            self._persist_state()
        self.role = Role.FOLLOWER
        self.votes = set()
        self._reset_timer(now)

    def set_peers(self, peers: set[str]) -> None:
        """Single-server membership change, applied by the admission layer."""
        self.peers = set(peers)
        if self.role == Role.LEADER:
            for p in self._others():
                self.next_index.setdefault(p, len(self.log))
                self.match_count.setdefault(p, 0)

    def restore_applied(self, count: int) -> None:
        """After restart: entries up to ``count`` were applied pre-crash,
        hence committed."""
        self.commit_index = max(self.commit_index, count)
        self.last_applied = count

    # -- driving ----------------------------------------------------------

    def tick(self, now: int) -> list[Message]:
        if self.role == Role.LEADER:
            if now - self._last_heartbeat >= HEARTBEAT_TICKS:
                self._last_heartbeat = now
                return self.replication_messages()
            return []
        if now - self._last_reset >= self._timeout:
            return self._start_election(now)
        return []

    def _start_election(self, now: int) -> list[Message]:
        self.role = Role.CANDIDATE
        self.current_term += 1
        self.voted_for = self.node_id
        self._persist_state()
        self.votes = {self.node_id}
        self._reset_timer(now)
        if len(self.votes) >= self._majority():
            return self._become_leader(now)
        return [
            RequestVote(
                frm=self.node_id,
                to=p,
                term=self.current_term,
                candidate_id=self.node_id,
                last_log_index=len(self.log) - 1,
                last_log_term=self._last_log_term(),
            )
            for p in self._others()
        ]

    def _become_leader(self, now: int) -> list[Message]:
        self.role = Role.LEADER
        self.last_known_leader = self.node_id
        self.next_index = {p: len(self.log) for p in self._others()}
        self.match_count = {p: 0 for p in self._others()}
        self._last_heartbeat = now
        # no-op entry: commits the new term without waiting for client traffic
        self.log.append(LogRecord(self.current_term, b""))
        self.storage.append_records(len(self.log) - 1, self.log[-1:])
        self._advance_commit()
        return self.replication_messages()

    def replication_messages(self) -> list[Message]:
        """AppendEntries for every peer from its next_index (heartbeat when
        nothing is pending)."""
        out = []
        for p in self._others():
            nxt = self.next_index.get(p, len(self.log))
            prev = nxt - 1
            entries = self.log[nxt : nxt + MAX_BATCH]
            out.append(
                AppendEntries(
                    frm=self.node_id,
                    to=p,
                    term=self.current_term,
                    leader_id=self.node_id,
                    prev_log_index=prev,
                    prev_log_term=self.log[prev].term if prev >= 0 else 0,
                    entries=list(entries),
                    leader_commit=self.commit_index,
                )
            )
        return out

    def propose(self, command: bytes) -> int:
        """Leader-only: append a command; returns its log position."""
        if self.role != Role.LEADER:
            raise NotLeaderError(leader_hint=self.last_known_leader)
        self.log.append(LogRecord(self.current_term, command))
        self.storage.append_records(len(self.log) - 1, self.log[-1:])
        self._advance_commit()
        return len(self.log) - 1

    def take_committed(self) -> list[tuple[int, LogRecord]]:
        """Newly committed records since the last call, with positions."""
        out = [
            (i, self.log[i]) for i in range(self.last_applied, self.commit_index)
        ]
        self.last_applied = self.commit_index
        return out

    # -- message handling --------------------------------------------------

    def handle(self, msg: Message, now: int = 0) -> list[Message]:
        if msg.term > self.current_term:
            self._step_down(msg.term, now)
        if isinstance(msg, RequestVote):
            return [self._on_request_vote(msg, now)]
        if isinstance(msg, RequestVoteReply):
            return self._on_vote_reply(msg)
        if isinstance(msg, AppendEntries):
            return [self._on_append_entries(msg, now)]
        if isinstance(msg, AppendEntriesReply):
            self._on_append_reply(msg)
            return []
        return []  # unknown kinds are ignored

    def _on_request_vote(self, msg: RequestVote, now: int) -> Message:
        granted = False
        if msg.term >= self.current_term and self.voted_for in (None, msg.candidate_id):
            up_to_date = msg.last_log_term > self._last_log_term() or (
                msg.last_log_term == self._last_log_term()
                and msg.last_log_index >= len(self.log) - 1
            )
            if up_to_date:
                granted = True
                self.voted_for = msg.candidate_id
                self._persist_state()
                self._reset_timer(now)
        return RequestVoteReply(
            frm=self.node_id, to=msg.frm, term=self.current_term, granted=granted
        )

    def _on_vote_reply(self, msg: RequestVoteReply) -> list[Message]:
        if self.role != Role.CANDIDATE or msg.term != self.current_term:
            return []
        if msg.granted:
            self.votes.add(msg.frm)
            if len(self.votes) >= self._majority():
                return self._become_leader(self._last_reset)
        return []

    def _on_append_entries(self, msg: AppendEntries, now: int) -> Message:
        if msg.term < self.current_term:
            return AppendEntriesReply(
                frm=self.node_id, to=msg.frm, term=self.current_term,
                success=False, hint=len(self.log),
            )
        # equal or newer term: this is the leader
        if self.role != Role.FOLLOWER:
            self._step_down(msg.term, now)
        self.last_known_leader = msg.leader_id
        self._reset_timer(now)

        if msg.prev_log_index >= len(self.log):
            return AppendEntriesReply(
                frm=self.node_id, to=msg.frm, term=self.current_term,
                success=False, hint=len(self.log),
            )
        if msg.prev_log_index >= 0 and self.log[msg.prev_log_index].term != msg.prev_log_term:
            return AppendEntriesReply(
                frm=self.node_id, to=msg.frm, term=self.current_term,
                success=False, hint=msg.prev_log_index,
            )

        # append, truncating on the first conflict
        insert_at = msg.prev_log_index + 1
        for offset, record in enumerate(msg.entries):
            pos = insert_at + offset
            if pos < len(self.log):
                if self.log[pos].term == record.term:
                    continue
                del self.log[pos:]
                self.storage.truncate(pos)
            self.log.append(record)
            self.storage.append_records(pos, [record])

        match = insert_at + len(msg.entries)
        if msg.leader_commit > self.commit_index:
            self.commit_index = min(msg.leader_commit, len(self.log))
        return AppendEntriesReply(
            frm=self.node_id, to=msg.frm, term=self.current_term,
            success=True, match_count=match,
        )

    def _on_append_reply(self, msg: AppendEntriesReply) -> None:
        if self.role != Role.LEADER or msg.term != self.current_term:
            return
        if msg.frm not in self.peers:
            return
        if msg.success:
            if msg.match_count > self.match_count.get(msg.frm, 0):
                self.match_count[msg.frm] = msg.match_count
            self.next_index[msg.frm] = max(
                self.next_index.get(msg.frm, 0), msg.match_count
            )
            self._advance_commit()
        else:
            nxt = self.next_index.get(msg.frm, len(self.log))
            self.next_index[msg.frm] = max(0, min(nxt - 1, msg.hint))

    def _advance_commit(self) -> None:
        # counts including self; an entry commits once a majority holds it
        # and it belongs to the current term
        counts = sorted(
            [len(self.log)] + [self.match_count.get(p, 0) for p in self._others()],
            reverse=True,
        )
        candidate = counts[self._majority() - 1]
        while candidate > self.commit_index:
            if self.log[candidate - 1].term == self.current_term:
                self.commit_index = candidate
                break
            candidate -= 1
