"""Deterministic single-threaded cluster simulator.

Everything runs on a logical clock: message delivery, drops, delays,
partitions, crashes, and restarts are all driven by one seeded RNG, so a
(seed, config, workload) triple always produces the same trace.

Workload events are ``(tick, op, arg)`` with op one of:

* ``propose``   arg: command bytes; retried by a simulated client until
                committed (the per-node applier deduplicates, so retries
                never double-apply)
* ``crash``     arg: node id (persistent storage survives)
* ``restart``   arg: node id
* ``partition`` arg: list of node-id groups; traffic crosses groups never
* ``heal``      arg: ignored
* ``set_drop``  arg: new drop probability

Scheduled partitions can also come from SimNetConfig. Traces capture role
changes, commit advances, and fault events, plus final per-node states and
the registry of first-committed records for the safety checkers below.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .raft import Message, RaftNode, Role
from .storage import MemoryRaftStorage

RETRY_INTERVAL_TICKS = 30


@dataclass(frozen=True)
class PartitionWindow:
    start_tick: int
    end_tick: int
    nodes: frozenset[str]  # isolated group; everyone else forms the other side


@dataclass
class SimNetConfig:
    seed: int = 0
    drop_probability: float = 0.0
    delay_range: int = 0
    partitions: list[PartitionWindow] = field(default_factory=list)


@dataclass
class TraceEvent:
    tick: int
    node: str
    kind: str
    data: dict

    def to_json(self) -> dict:
        return {"tick": self.tick, "node": self.node, "kind": self.kind, **self.data}


@dataclass
class Trace:
    cluster_size: int
    seed: int
    events: list[TraceEvent]
    final_states: dict[str, dict]
    committed_records: dict[int, tuple[int, bytes]]  # position -> (term, command)
    leaders_by_term: dict[int, set[str]]
    applied: dict[str, list[tuple[int, bytes]]]
    completed: bool
    ticks_run: int
    divergences: list[str]
    dropped_messages: int

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for ev in self.events:
                fh.write(json.dumps(ev.to_json(), sort_keys=True) + "\n")

    def commit_ticks(self) -> list[int]:
        return [ev.tick for ev in self.events if ev.kind == "commit"]


class _Client:
    """Proposes one command, retrying against whoever leads, until committed."""

    __slots__ = ("command", "submitted_tick", "last_attempt", "committed_tick")

    def __init__(self, command: bytes, tick: int):
        self.command = command
        self.submitted_tick = tick
        self.last_attempt = -RETRY_INTERVAL_TICKS
        self.committed_tick: int | None = None


class SimCluster:
    def __init__(self, node_ids: list[str], config: SimNetConfig):
        self.config = config
        self.rng = random.Random(config.seed)
        self.node_ids = list(node_ids)
        self.peer_set = set(node_ids)
        self.storages = {n: MemoryRaftStorage() for n in node_ids}
        self.nodes: dict[str, RaftNode] = {}
        self.drop_probability = config.drop_probability
        self.partition_groups: list[frozenset[str]] | None = None
        self._heap: list[tuple[int, int, Message]] = []
        self._seq = 0
        self.dropped = 0
        for n in node_ids:
            self._boot(n, now=0)

    def _boot(self, node_id: str, now: int) -> None:
        rng = random.Random(self.rng.getrandbits(64))
        self.nodes[node_id] = RaftNode(
            node_id, self.peer_set, self.storages[node_id], rng=rng, now=now
        )

    def crash(self, node_id: str) -> None:
        self.nodes.pop(node_id, None)

    def restart(self, node_id: str, now: int) -> None:
        if node_id not in self.nodes:
            self._boot(node_id, now)

    def alive(self) -> list[str]:
        return [n for n in self.node_ids if n in self.nodes]

    def _connected(self, a: str, b: str) -> bool:
        if self.partition_groups is None:
            return True
        ga = next((g for g in self.partition_groups if a in g), None)
        gb = next((g for g in self.partition_groups if b in g), None)
        return ga is gb

    def send(self, msgs: list[Message], now: int) -> None:
        for msg in msgs:
            if self.drop_probability and self.rng.random() < self.drop_probability:
                self.dropped += 1
                continue
            delay = self.rng.randint(0, self.config.delay_range) if self.config.delay_range else 0
            heapq.heappush(self._heap, (now + 1 + delay, self._seq, msg))
            self._seq += 1

    def deliver_due(self, now: int) -> None:
        while self._heap and self._heap[0][0] <= now:
            _, _, msg = heapq.heappop(self._heap)
            node = self.nodes.get(msg.to)
            if node is None:
                continue
            if not self._connected(msg.frm, msg.to):
                self.dropped += 1
                continue
            self.send(node.handle(msg, now), now)

    def apply_scheduled_partitions(self, now: int) -> None:
        active = [w for w in self.config.partitions if w.start_tick <= now < w.end_tick]
        if active:
            group = active[0].nodes
            rest = frozenset(self.peer_set - group)
            self.partition_groups = [group, rest]
        elif self.config.partitions and self.partition_groups is not None:
            inside_any = any(
                w.start_tick <= now < w.end_tick for w in self.config.partitions
            )
            if not inside_any:
                self.partition_groups = None


def run_simulation(
    cluster_size: int,
    net_config: SimNetConfig,
    workload: list[tuple[int, str, object]],
    max_ticks: int,
) -> Trace:
    assert cluster_size >= 1
    node_ids = [f"n{i + 1}" for i in range(cluster_size)]
    cluster = SimCluster(node_ids, net_config)

    events: list[TraceEvent] = []
    leaders_by_term: dict[int, set[str]] = {}
    committed: dict[int, tuple[int, bytes]] = {}
    divergences: list[str] = []
    appliers: dict[str, tuple[list, set]] = {n: ([], set()) for n in node_ids}
    clients: list[_Client] = []

    pending = sorted(workload, key=lambda e: e[0])
    cursor = 0
    last_roles = {n: Role.FOLLOWER for n in node_ids}

    def note(tick: int, node: str, kind: str, **data) -> None:
        events.append(TraceEvent(tick, node, kind, data))

    def collect(tick: int) -> None:
        for n in sorted(cluster.nodes):
            node = cluster.nodes[n]
            if last_roles.get(n) != node.role:
                last_roles[n] = node.role
                note(tick, n, "role_change", role=node.role.value, term=node.current_term)
                if node.role == Role.LEADER:
                    leaders_by_term.setdefault(node.current_term, set()).add(n)
            fresh = node.take_committed()
            if fresh:
                note(tick, n, "commit", upto=node.commit_index)
            applied_list, seen = appliers[n]
            for pos, record in fresh:
                prev = committed.get(pos)
                if prev is None:
                    committed[pos] = (record.term, record.command)
                elif prev != (record.term, record.command):
                    divergences.append(
                        f"tick {tick}: node {n} committed position {pos} with a different record"
                    )
                if not record.command or record.command in seen:
                    continue
                seen.add(record.command)
                applied_list.append((pos, record.command))
                for c in clients:
                    if c.command == record.command and c.committed_tick is None:
                        c.committed_tick = tick
                        note(tick, n, "proposal_committed", command=record.command.hex())

    tick = 0
    for tick in range(max_ticks):
        cluster.apply_scheduled_partitions(tick)
        while cursor < len(pending) and pending[cursor][0] <= tick:
            _, op, arg = pending[cursor]
            cursor += 1
            if op == "propose":
                clients.append(_Client(arg, tick))
                note(tick, "", "propose", command=arg.hex())
            elif op == "crash":
                cluster.crash(arg)
                appliers[arg] = ([], set())  # state machine rebuilds on restart
                note(tick, arg, "crash")
            elif op == "restart":
                cluster.restart(arg, tick)
                note(tick, arg, "restart")
            elif op == "partition":
                cluster.partition_groups = [frozenset(g) for g in arg]
                note(tick, "", "partition", groups=[sorted(g) for g in arg])
            elif op == "heal":
                cluster.partition_groups = None
                note(tick, "", "heal")
            elif op == "set_drop":
                cluster.drop_probability = float(arg)
                note(tick, "", "set_drop", p=float(arg))
            else:
                raise ValueError(f"unknown workload op {op!r}")

        cluster.deliver_due(tick)
        for n in sorted(cluster.nodes):
            cluster.send(cluster.nodes[n].tick(tick), tick)

        # clients retry against the freshest leader until their command lands
        leaders = [
            nd for nd in cluster.nodes.values() if nd.role == Role.LEADER
        ]
        leader = max(leaders, key=lambda nd: nd.current_term, default=None)
        if leader is not None:
            for c in clients:
                if c.committed_tick is None and tick - c.last_attempt >= RETRY_INTERVAL_TICKS:
                    c.last_attempt = tick
                    leader.propose(c.command)

        collect(tick)

        if cursor == len(pending) and all(c.committed_tick is not None for c in clients):
            tick += 1
            break

    final_states = {}
    for n in node_ids:
        node = cluster.nodes.get(n)
        storage = cluster.storages[n]
        final_states[n] = {
            "alive": node is not None,
            "role": node.role.value if node else None,
            "term": node.current_term if node else storage.term,
            "commit_index": node.commit_index if node else 0,
            "log": [(r.term, r.command) for r in storage.records],
        }

    return Trace(
        cluster_size=cluster_size,
        seed=net_config.seed,
        events=events,
        final_states=final_states,
        committed_records=committed,
        leaders_by_term=leaders_by_term,
        applied={n: list(appliers[n][0]) for n in node_ids},
        completed=cursor == len(pending) and all(c.committed_tick is not None for c in clients),
        ticks_run=tick,
        divergences=divergences,
        dropped_messages=cluster.dropped,
    )


# -- invariant checkers -------------------------------------------------------


def check_election_safety(trace: Trace) -> list[str]:
    return [
        f"term {t} has leaders {sorted(ls)}"
        for t, ls in trace.leaders_by_term.items()
        if len(ls) > 1
    ]


def check_log_matching(trace: Trace) -> list[str]:
    problems = []
    states = list(trace.final_states.items())
    for i in range(len(states)):
        for j in range(i + 1, len(states)):
            (na, a), (nb, b) = states[i], states[j]
            la, lb = a["log"], b["log"]
            for idx in range(min(len(la), len(lb)) - 1, -1, -1):
                if la[idx][0] == lb[idx][0]:
                    if la[: idx + 1] != lb[: idx + 1]:
                        problems.append(f"{na}/{nb} share term at {idx} but prefixes differ")
                    break
    return problems


def check_durability(trace: Trace) -> list[str]:
    """No committed record may be missing or different anywhere it should be."""
    problems = list(trace.divergences)
    if not trace.committed_records:
        return problems
    # reference: the log holding the latest state among alive nodes
    alive = [n for n, s in trace.final_states.items() if s["alive"]]
    if not alive:
        return problems + ["no nodes alive at end of trace"]
    ref = max(
        alive,
        key=lambda n: (
            trace.final_states[n]["log"][-1][0] if trace.final_states[n]["log"] else 0,
            len(trace.final_states[n]["log"]),
        ),
    )
    ref_log = trace.final_states[ref]["log"]
    for pos, (term, cmd) in sorted(trace.committed_records.items()):
        if pos >= len(ref_log):
            problems.append(f"committed position {pos} missing from {ref}")
        elif ref_log[pos] != (term, cmd):
            problems.append(f"committed position {pos} differs on {ref}")
    for n, state in trace.final_states.items():
        log, ci = state["log"], state["commit_index"]
        for pos, rec in trace.committed_records.items():
            if pos < ci and (pos >= len(log) or log[pos] != rec):
                problems.append(f"node {n} committed prefix disagrees at {pos}")
    return problems


def check_applied_consistency(trace: Trace) -> list[str]:
    problems = []
    seqs = [s for s in trace.applied.values() if s]
    for i in range(len(seqs)):
        for j in range(i + 1, len(seqs)):
            a, b = seqs[i], seqs[j]
            n = min(len(a), len(b))
            if a[:n] != b[:n]:
                problems.append("applied sequences diverge")
    return problems


def check_exactly_once(trace: Trace) -> list[str]:
    problems = []
    for n, seq in trace.applied.items():
        cmds = [c for _, c in seq]
        if len(cmds) != len(set(cmds)):
            problems.append(f"node {n} applied a command more than once")
    return problems


def check_liveness(trace: Trace, after_tick: int, window_ticks: int) -> list[str]:
    ok = any(after_tick < t <= after_tick + window_ticks for t in trace.commit_ticks())
    if ok:
        return []
    return [f"no commit within {window_ticks} ticks after {after_tick}"]
