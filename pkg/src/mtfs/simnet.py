"""Deterministic discrete-event simulator for overlay nodes.

One logical clock (milliseconds) and a priority queue of deliveries.  Links
are FIFO: a message never overtakes an earlier one on the same (src, dst)
pair.  A failed node drops every message addressed to it or still in flight
from it until it recovers.  Identical configs and scripts give identical
event logs.
"""

from __future__ import annotations

import csv
import hashlib
import heapq
import io
import itertools
import random
import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import crypto
from .errors import JoinFailed, ScenarioError, UnreachableNode
from .ledger import Ledger
from .node import ClientEndpoint, StorageNode
from .overlay import NodeInfo, RedundancyConfig
from .replication import AuditReport, ReplicationPolicy


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    latency: tuple = ("fixed", 10.0)  # or ("uniform", lo_ms, hi_ms)
    node_count: int = 0
    redundancy: RedundancyConfig = field(default_factory=RedundancyConfig)
    failures: tuple = ()  # (time_ms after initial joins, node_index, "fail" | "recover")
    k: int = 2
    policy: ReplicationPolicy = field(default_factory=ReplicationPolicy)

    def __post_init__(self):
        kind = self.latency[0]
        if kind == "fixed":
            if len(self.latency) != 2 or self.latency[1] < 0:
                raise ValueError("fixed latency needs one non-negative value")
        elif kind == "uniform":
            if len(self.latency) != 3 or not 0 <= self.latency[1] <= self.latency[2]:
                raise ValueError("uniform latency needs 0 <= lo <= hi")
        else:
            raise ValueError(f"unknown latency model {kind!r}")


@dataclass(frozen=True)
class TraceEntry:
    node_id: str
    time: float
    hops: int
    sender: Optional[str]


@dataclass
class DeliveryTrace:
    msg_id: str
    origin: str
    entries: list = field(default_factory=list)
    sent: int = 0

    def hops_by_node(self) -> dict:
        return {e.node_id: e.hops for e in self.entries}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["msg_id", "node", "time_ms", "hops"])
        for e in self.entries:
            w.writerow([self.msg_id, e.node_id, f"{e.time:.3f}", e.hops])
        return buf.getvalue()


@dataclass(frozen=True)
class Metrics:
    coverage: float
    max_hops: int
    mean_hops: float
    messages_sent: int


def metrics(trace: DeliveryTrace, population: int) -> Metrics:
    """Coverage is the delivered fraction of ``population`` (live nodes, origin included)."""
    reached = {e.node_id for e in trace.entries}
    hops = [e.hops for e in trace.entries if e.sender is not None]
    return Metrics(
        coverage=len(reached) / population if population else 0.0,
        max_hops=max((e.hops for e in trace.entries), default=0),
        mean_hops=sum(hops) / len(hops) if hops else 0.0,
        messages_sent=trace.sent,
    )


def traces_to_csv(traces) -> str:
    out = ["msg_id,node,time_ms,hops\n"]
    for t in traces:
        out.extend(t.to_csv().splitlines(keepends=True)[1:])
    return "".join(out)


class Simulator:
    def __init__(self, config: Optional[SimConfig] = None):
        self.config = config or SimConfig()
        self.rng = random.Random(self.config.seed)
        self.now = 0.0
        self._queue: list = []
        self._tie = itertools.count()
        self._link_clock: dict = {}
        self.endpoints: dict = {}
        self.nodes: list = []  # StorageNodes in join order
        self.failed: set = set()
        self.traces: dict = {}
        self.event_log: list = []
        self.dropped = 0
        self.ledger = Ledger()
        self._gid_owner: dict = {}
        self._driver = self.add_client("driver")
        for _ in range(self.config.node_count):
            self.join_node()
        # failure times count from the moment the initial network is built
        for t, idx, action in self.config.failures:
            self._schedule(self.now + float(t), ("schedule", idx, action))

    # -------------------------------------------------------------- plumbing
    def _schedule(self, at: float, event: tuple) -> None:
        heapq.heappush(self._queue, (at, next(self._tie), event))

    def _latency(self) -> float:
        kind, *args = self.config.latency
        if kind == "fixed":
            return float(args[0])
        return self.rng.uniform(args[0], args[1])

    def send(self, src: str, dst: str, msg, hops: int) -> None:
        at = self.now + self._latency()
        link = (src, dst)
        at = max(at, self._link_clock.get(link, 0.0))
        self._link_clock[link] = at
        if msg.is_broadcast and msg.msg_id in self.traces:
            self.traces[msg.msg_id].sent += 1
        self._schedule(at, ("msg", src, dst, msg, hops))

    def _dispatch(self, src: str, outbound, hops: int) -> None:
        for dst, msg in outbound:
            self.send(src, dst, msg, hops)

    def step(self) -> bool:
        if not self._queue:
            return False
        at, _, event = heapq.heappop(self._queue)
        self.now = max(self.now, at)
        kind = event[0]
        if kind == "schedule":
            _, idx, action = event
            if idx >= len(self.nodes):
                raise ScenarioError(f"failure schedule names node {idx}, only {len(self.nodes)} exist")
            (self.fail if action == "fail" else self.recover)(self.nodes[idx].node_id)
            return True
        _, src, dst, msg, hops = event
        self.event_log.append((round(at, 6), src, dst, int(msg.variant), msg.tag, msg.msg_id.hex()))
        if dst in self.failed or src in self.failed or dst not in self.endpoints:
            self.dropped += 1
            return True
        endpoint = self.endpoints[dst]
        if msg.is_broadcast and msg.msg_id in self.traces and msg.msg_id not in endpoint.seen:
            self.traces[msg.msg_id].entries.append(TraceEntry(dst, self.now, hops, src))
        was_joined = endpoint.joined
        out = endpoint.handle_message(src, msg)
        if endpoint.joined and not was_joined:
            self._register_gid(endpoint)
        self._dispatch(dst, out, hops + 1)
        return True

    def run(self, until: Optional[float] = None, stop: Optional[Callable[[], bool]] = None) -> None:
        while self._queue:
            if stop is not None and stop():
                return
            if until is not None and self._queue[0][0] > until:
                self.now = max(self.now, until)
                return
            self.step()
        if until is not None:
            self.now = max(self.now, until)

    def _register_gid(self, node) -> None:
        owners = self._gid_owner.setdefault(node.group_id, set())
        owners.add(node.node_id)
        limit = node.redundancy.members_per_position
        live = [o for o in owners if o not in self.failed]
        if len(live) > limit:
            raise AssertionError(f"group id {node.group_id!r} held by {len(live)} live nodes")

    # ------------------------------------------------------------- endpoints
    def _make_id(self, label: str) -> str:
        kp = crypto.keygen(seed=f"sim-{self.config.seed}-{label}")
        return kp.public.digest()

    def add_client(self, label: str) -> ClientEndpoint:
        client = ClientEndpoint(NodeInfo(self._make_id(f"client-{label}"), "sim", 0))
        self.endpoints[client.node_id] = client
        return client

    def new_node(self, cheat: bool = False) -> StorageNode:
        idx = len([e for e in self.endpoints.values() if isinstance(e, StorageNode)])
        info = NodeInfo(self._make_id(f"node-{idx}"), "sim", 7717)
        node = StorageNode(
            info,
            policy=self.config.policy,
            redundancy=self.config.redundancy,
            k=self.config.k,
            rng=random.Random(f"{self.config.seed}-nonce-{idx}"),
            cheat=cheat,
        )
        self.endpoints[node.node_id] = node
        return node

    @property
    def root(self) -> StorageNode:
        return self.nodes[0]

    def live_nodes(self) -> list:
        return [n for n in self.nodes if n.node_id not in self.failed and n.joined]

    def join_node(self, contact: Optional[StorageNode] = None, cheat: bool = False) -> StorageNode:
        node = self.new_node(cheat=cheat)
        if not self.nodes:
            node.bootstrap()
            self._register_gid(node)
        else:
            contact = contact or self.root
            self._dispatch(node.node_id, node.start_join(contact.info), 1)
            self.run()
            if not node.joined:
                raise node.join_error or JoinFailed(node.node_id)
        self.nodes.append(node)
        return node

    def join(self, count: int) -> list:
        return [self.join_node() for _ in range(count)]

    def join_concurrent(self, count: int, contact: Optional[StorageNode] = None) -> list:
        """Start ``count`` joins at the same instant and let them race."""
        contact = contact or self.root
        fresh = [self.new_node() for _ in range(count)]
        for node in fresh:
            self._dispatch(node.node_id, node.start_join(contact.info), 1)
        self.run()
        for node in fresh:
            if not node.joined:
                raise node.join_error or JoinFailed(node.node_id)
            self.nodes.append(node)
        return fresh

    def fail(self, node_id: str) -> None:
        self.failed.add(node_id)

    def recover(self, node_id: str) -> None:
        self.failed.discard(node_id)

    def node_by_gid(self, gid: str) -> StorageNode:
        for n in self.nodes:
            if n.group_id == gid:
                return n
        raise KeyError(gid)

    # ------------------------------------------------------------- broadcast
    def broadcast(self, origin: StorageNode, data: bytes = b"") -> DeliveryTrace:
        msg, out = origin.originate(data)
        trace = DeliveryTrace(msg.msg_id.hex(), origin.node_id, [TraceEntry(origin.node_id, self.now, 0, None)])
        self.traces[msg.msg_id] = trace
        self._dispatch(origin.node_id, out, 1)
        self.run()
        return trace

    # ---------------------------------------------------------------- gateway
    def gateway(self, label: str) -> "SimGateway":
        return SimGateway(self, self.add_client(label))

    def audit_round(self) -> AuditReport:
        """Every live node runs its challenges, then times out stragglers and repairs."""
        from .workflows import run_audit

        members = [n.info for n in self.nodes if n.joined]
        return run_audit(SimGateway(self, self._driver), members, self.run)

    def holders_of(self, key: str) -> list:
        """Nodes that track ``key`` as a replica and still have something stored for it."""
        return [n for n in self.nodes if key in n.holders and n.has_key(key)]


class SimGateway:
    """Request/response access to simulated nodes for a client endpoint."""

    def __init__(self, sim: Simulator, client: ClientEndpoint):
        self.sim = sim
        self.client = client

    def request_all(self, pairs) -> list:
        pairs = list(pairs)
        for dest, msg in pairs:
            self.sim.send(self.client.node_id, dest.node_id, msg, 1)
        keys = [msg.msg_id.hex() for _, msg in pairs]
        self.sim.run(stop=lambda: all(k in self.client.replies for k in keys))
        return [self.client.take_reply(msg) for _, msg in pairs]

    def request(self, dest: NodeInfo, msg):
        reply = self.request_all([(dest, msg)])[0]
        if reply is None:
            raise UnreachableNode(dest.node_id)
        return reply


def gossip_baseline(config: SimConfig, fanout: int, rounds: int = 20, origin: int = 0) -> DeliveryTrace:
    """Round-based push gossip: every informed node pushes to ``fanout`` random peers each round.

    Stops as soon as everyone is informed, which is the most favourable accounting for gossip.
    """
    n = config.node_count
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    if n < 1:
        raise ValueError("gossip needs at least one node")
    fanout = min(fanout, n - 1)
    rng = random.Random(config.seed)
    step = float(config.latency[1]) if config.latency[0] == "fixed" else float(config.latency[2])
    informed = {origin: 0}
    trace = DeliveryTrace(f"gossip-{config.seed}", str(origin), [TraceEntry(str(origin), 0.0, 0, None)])
    for rnd in range(1, rounds + 1):
        if len(informed) == n:
            break
        for node in sorted(informed):
            peers = rng.sample([p for p in range(n) if p != node], fanout)
            trace.sent += fanout
            for p in peers:
                if p not in informed:
                    informed[p] = rnd
                    trace.entries.append(TraceEntry(str(p), rnd * step, rnd, str(node)))
    return trace


def rounds_to_full(trace: DeliveryTrace, n: int) -> Optional[int]:
    if len({e.node_id for e in trace.entries}) < n:
        return None
    return max(e.hops for e in trace.entries)


# ---------------------------------------------------------------- scenarios
@dataclass(frozen=True)
class Step:
    lineno: int
    command: str
    args: dict


def _int(tok: str, lineno: int, what: str) -> int:
    try:
        value = int(tok)
    except ValueError:
        raise ScenarioError(f"line {lineno}: {what} must be an integer, got {tok!r}") from None
    if value < 0:
        raise ScenarioError(f"line {lineno}: {what} must be non-negative")
    return value


def _ms(tok: str, lineno: int) -> float:
    raw = tok[:-2] if tok.endswith("ms") else tok
    try:
        return float(raw)
    except ValueError:
        raise ScenarioError(f"line {lineno}: bad time {tok!r}") from None


def _parse_line(lineno: int, toks: list) -> Step:
    cmd, rest = toks[0], toks[1:]

    def need(n):
        if len(rest) < n:
            raise ScenarioError(f"line {lineno}: {cmd!r} needs at least {n} argument(s)")

    if cmd == "join":
        need(1)
        return Step(lineno, cmd, {"count": _int(rest[0], lineno, "join count")})
    if cmd == "broadcast":
        if len(rest) < 2 or rest[0] != "from":
            raise ScenarioError(f"line {lineno}: expected 'broadcast from <node> [payload <hex>]'")
        payload = b""
        if len(rest) >= 4 and rest[2] == "payload":
            try:
                payload = bytes.fromhex(rest[3])
            except ValueError:
                raise ScenarioError(f"line {lineno}: payload must be hex") from None
        elif len(rest) != 2:
            raise ScenarioError(f"line {lineno}: trailing tokens after broadcast")
        return Step(lineno, cmd, {"node": _int(rest[1], lineno, "node"), "payload": payload})
    if cmd in ("fail", "recover"):
        if len(rest) < 2 or rest[0] != "node":
            raise ScenarioError(f"line {lineno}: expected '{cmd} node <index> [at <t>ms]'")
        at = None
        if len(rest) >= 4 and rest[2] == "at":
            at = _ms(rest[3], lineno)
        elif len(rest) != 2:
            raise ScenarioError(f"line {lineno}: trailing tokens after {cmd}")
        return Step(lineno, cmd, {"node": _int(rest[1], lineno, "node"), "at": at})
    if cmd == "user":
        need(1)
        entry = 0
        if len(rest) >= 3 and rest[1] == "entry":
            entry = _int(rest[2], lineno, "entry")
        return Step(lineno, cmd, {"user": rest[0], "entry": entry})
    if cmd == "put":
        need(2)
        args = {"user": rest[0], "path": rest[1], "size": None, "text": None, "file": None}
        if len(rest) >= 4:
            if rest[2] == "size":
                args["size"] = _int(rest[3], lineno, "size")
            elif rest[2] in ("text", "file"):
                args[rest[2]] = rest[3]
            else:
                raise ScenarioError(f"line {lineno}: unknown put source {rest[2]!r}")
        return Step(lineno, cmd, args)
    if cmd == "get":
        need(2)
        out = rest[3] if len(rest) >= 4 and rest[2] == "to" else None
        return Step(lineno, cmd, {"user": rest[0], "path": rest[1], "to": out})
    if cmd == "share":
        need(3)
        return Step(lineno, cmd, {"user": rest[0], "path": rest[1], "receiver": rest[2]})
    if cmd == "accept":
        need(1)
        return Step(lineno, cmd, {"user": rest[0]})
    if cmd == "ls":
        need(1)
        return Step(lineno, cmd, {"user": rest[0], "path": rest[1] if len(rest) > 1 else ""})
    if cmd in ("audit", "metrics", "settle"):
        return Step(lineno, cmd, {})
    if cmd == "corrupt":
        # corrupt node <index> key <key>
        if len(rest) != 4 or rest[0] != "node" or rest[2] != "key":
            raise ScenarioError(f"line {lineno}: expected 'corrupt node <index> key <key>'")
        return Step(lineno, cmd, {"node": _int(rest[1], lineno, "node"), "key": rest[3]})
    raise ScenarioError(f"line {lineno}: unknown command {cmd!r}")


def parse_script(text: str) -> list:
    steps = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            toks = shlex.split(line)
        except ValueError as exc:
            raise ScenarioError(f"line {lineno}: {exc}") from None
        steps.append(_parse_line(lineno, toks))
    return steps


@dataclass
class ScenarioResult:
    traces: list = field(default_factory=list)
    output: list = field(default_factory=list)  # JSON-able records, one per reporting step
    files: dict = field(default_factory=dict)  # (user, path) -> bytes last read
    sessions: dict = field(default_factory=dict)
    network: object = None

    def trace_csv(self) -> str:
        return traces_to_csv(self.traces)


class UserSteps:
    """Executes the user-level scenario commands against any network backend.

    The backend provides ``ledger``, ``gateway(label)``, ``entry(index)`` and
    ``settle()``; the simulator and the TCP cluster both do.
    """

    def __init__(self, backend, seed: int, base_dir: Optional[Path] = None):
        self.backend = backend
        self.seed = seed
        self.base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
        self.rng = random.Random(f"{seed}-content")

    def keypair(self, user: str):
        return crypto.keygen(seed=f"scenario-{self.seed}-user-{user}")

    def _session(self, result: ScenarioResult, step: Step):
        try:
            return result.sessions[step.args["user"]]
        except KeyError:
            raise ScenarioError(f"line {step.lineno}: unknown user {step.args['user']!r}") from None

    def content(self, step: Step) -> bytes:
        a = step.args
        if a["text"] is not None:
            return a["text"].encode()
        if a["file"] is not None:
            path = Path(a["file"])
            return (path if path.is_absolute() else self.base_dir / path).read_bytes()
        return self.rng.randbytes(a["size"] if a["size"] is not None else 4096)

    def execute(self, step: Step, result: ScenarioResult) -> bool:
        """Run ``step`` if it is a user command; False when it is not one."""
        from .workflows import UserSession

        a, cmd = step.args, step.command
        if cmd == "user":
            kp = self.keypair(a["user"])
            gw = self.backend.gateway(f"user-{a['user']}")
            result.sessions[a["user"]] = UserSession(
                kp, self.backend.ledger, gw, self.backend.entry(a["entry"]), seed=f"{self.seed}-{a['user']}"
            )
            result.output.append({"step": "user", "user": a["user"], "public_key": kp.public.hex()})
        elif cmd == "put":
            data = self.content(step)
            receipt = self._session(result, step).put_file(a["path"], data)
            self.backend.settle()
            result.output.append(
                {"step": "put", "user": a["user"], "path": a["path"], "size": len(data),
                 "sha256": hashlib.sha256(data).hexdigest(), "height": receipt.height}
            )
        elif cmd == "get":
            data = self._session(result, step).get_file(a["path"])
            result.files[(a["user"], a["path"])] = data
            if a["to"]:
                (self.base_dir / a["to"]).write_bytes(data)
            result.output.append(
                {"step": "get", "user": a["user"], "path": a["path"], "size": len(data),
                 "sha256": hashlib.sha256(data).hexdigest()}
            )
        elif cmd == "share":
            if a["receiver"] not in result.sessions:
                raise ScenarioError(f"line {step.lineno}: unknown receiver {a['receiver']!r}")
            receiver = result.sessions[a["receiver"]].keypair.public
            receipt = self._session(result, step).share_file(receiver, a["path"])
            self.backend.settle()
            result.output.append({"step": "share", "user": a["user"], "path": a["path"], "to": a["receiver"],
                                  "height": receipt.height})
        elif cmd == "accept":
            session = self._session(result, step)
            accepted = []
            for grant in session.pending_shares():
                session.accept_share(grant)
                accepted.append(grant.body.name)
            self.backend.settle()
            result.output.append({"step": "accept", "user": a["user"], "accepted": accepted})
        elif cmd == "ls":
            rows = self._session(result, step).ls(a["path"])
            result.output.append(
                {"step": "ls", "user": a["user"], "path": a["path"],
                 "entries": [[r.name, r.kind, r.size, r.object_ref] for r in rows]}
            )
        else:
            return False
        return True


class SimBackend:
    def __init__(self, sim: Simulator):
        self.sim = sim

    @property
    def ledger(self):
        return self.sim.ledger

    def gateway(self, label: str):
        return self.sim.gateway(label)

    def entry(self, index: int) -> NodeInfo:
        if index >= len(self.sim.nodes):
            raise ScenarioError(f"entry node {index} does not exist")
        return self.sim.nodes[index].info

    def settle(self) -> None:
        self.sim.run()


def run_script(config: SimConfig, script: str, base_dir=None) -> ScenarioResult:
    """Execute a scenario script on a fresh simulator; deterministic for a given config."""
    sim = Simulator(config)
    result = ScenarioResult(network=sim)
    users = UserSteps(SimBackend(sim), config.seed, base_dir)
    for step in parse_script(script):
        a, cmd = step.args, step.command

        def node_at(i):
            if i >= len(sim.nodes):
                raise ScenarioError(f"line {step.lineno}: node {i} does not exist ({len(sim.nodes)} joined)")
            return sim.nodes[i]

        if cmd == "join":
            sim.join(a["count"])
        elif cmd == "broadcast":
            trace = sim.broadcast(node_at(a["node"]), a["payload"])
            result.traces.append(trace)
        elif cmd in ("fail", "recover"):
            target = node_at(a["node"]).node_id
            action = sim.fail if cmd == "fail" else sim.recover
            if a["at"] is None:
                action(target)
            else:
                sim._schedule(sim.now + a["at"], ("schedule", a["node"], cmd))
        elif cmd == "audit":
            report = sim.audit_round()
            sim.run()
            result.output.append({"step": "audit", **report.to_dict()})
        elif cmd == "metrics":
            if not result.traces:
                raise ScenarioError(f"line {step.lineno}: metrics before any broadcast")
            live = len(sim.live_nodes())
            m = metrics(result.traces[-1], live)
            result.output.append({"step": "metrics", **m.__dict__})
        elif cmd == "settle":
            sim.run()
        elif cmd == "corrupt":
            node = node_at(a["node"])
            oid = node.store.resolve(a["key"])
            if oid is None:
                raise ScenarioError(f"line {step.lineno}: node {a['node']} does not hold {a['key']}")
            node.store.inject(oid, b"\x00corrupted")
        elif not users.execute(step, result):
            raise ScenarioError(f"line {step.lineno}: unhandled command {cmd!r}")
    return result
