"""TCP transport: the overlay frame format over real sockets.

Each endpoint runs inside a NodeRuntime: one listener thread, one reader
thread per connection and a single worker that feeds the endpoint's
``handle_message`` one message at a time, so node logic stays
single-threaded exactly as under the simulator.  A dialer opens every
connection with a HELLO frame naming itself; the acceptor answers with its
own HELLO.  Connections are pooled per peer and used in both directions.
"""

from __future__ import annotations

import hashlib
import logging
import queue
import random
import socket
import threading
import time
from pathlib import Path
from typing import Callable, Optional

from . import crypto, wire
from .errors import ConnectionRefused, JoinFailed, MtfsError, PeerClosed, UnreachableNode
from .ledger import Ledger
from .merkle import ObjectStore
from .node import ClientEndpoint, StorageNode
from .overlay import Message, NodeInfo, RedundancyConfig, Tag, Variant, app_payload, parse_app
from .replication import ReplicationPolicy

log = logging.getLogger(__name__)

DEFAULT_PORT = 7717
BACKOFF_BASE = 0.2
BACKOFF_CAP = 10.0
BACKOFF_ATTEMPTS = 6


def backoff_delays(attempts: int = BACKOFF_ATTEMPTS, base: float = BACKOFF_BASE, cap: float = BACKOFF_CAP) -> list:
    """Sleep before each retry: base, 2*base, 4*base ... capped; one fewer than attempts."""
    return [min(cap, base * 2**i) for i in range(max(0, attempts - 1))]


class Connection:
    """A framed, thread-safe-for-writing TCP connection."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._wlock = threading.Lock()
        self.peer: Optional[NodeInfo] = None
        self.closed = False
        self.dialed = False

    def send(self, msg: Message) -> None:
        data = wire.encode(msg)
        with self._wlock:
            try:
                self.sock.sendall(data)
            except OSError as exc:
                self.closed = True
                raise PeerClosed(str(exc)) from exc

    def _read_exact(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            try:
                chunk = self.sock.recv(n - len(buf))
            except OSError as exc:
                self.closed = True
                raise PeerClosed(str(exc)) from exc
            if not chunk:
                self.closed = True
                raise PeerClosed("connection closed by peer")
            buf += chunk
        return bytes(buf)

    def recv(self) -> Message:
        prefix = self._read_exact(4)
        total = wire.frame_length(prefix)
        if total - 4 > wire.MAX_FRAME:
            self.close()
            raise PeerClosed(f"oversized frame ({total} bytes)")
        return wire.decode(prefix + self._read_exact(total - 4))

    def close(self) -> None:
        self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def listen(host: str = "127.0.0.1", port: int = DEFAULT_PORT) -> socket.socket:
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(64)
    return srv


def connect(
    host: str,
    port: int,
    attempts: int = BACKOFF_ATTEMPTS,
    base: float = BACKOFF_BASE,
    cap: float = BACKOFF_CAP,
    sleep: Callable[[float], None] = time.sleep,
) -> Connection:
    """Dial with capped exponential backoff; ConnectionRefused once attempts run out."""
    delays = backoff_delays(attempts, base, cap)
    last = None
    for i in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return Connection(sock)
        except OSError as exc:
            last = exc
            if i < len(delays):
                sleep(delays[i])
    raise ConnectionRefused(f"{host}:{port} after {attempts} attempts: {last}")


def send(conn: Connection, msg: Message) -> None:
    conn.send(msg)


def recv(conn: Connection) -> Message:
    return conn.recv()


def _hello(info: NodeInfo, seq: int) -> Message:
    msg_id = hashlib.sha256(bytes.fromhex(info.node_id) + b"hello" + seq.to_bytes(8, "big")).digest()
    return Message(Variant.APP, msg_id, bytes.fromhex(info.node_id), payload=app_payload(Tag.HELLO, info.to_dict()))


class NodeRuntime:
    """Hosts one endpoint (StorageNode or ClientEndpoint) on real sockets."""

    def __init__(self, endpoint, listener: Optional[socket.socket] = None, dial_attempts: int = BACKOFF_ATTEMPTS,
                 dial_base: float = BACKOFF_BASE):
        self.endpoint = endpoint
        self.listener = listener
        self.dial_attempts = dial_attempts
        self.dial_base = dial_base
        self.inbox: queue.Queue = queue.Queue()
        self.conns: dict = {}  # peer node_id -> Connection
        self.addresses: dict = {}  # peer node_id -> NodeInfo learned from HELLO
        self._lock = threading.RLock()
        self._hello_seq = 0
        self._threads: list = []
        self._stopping = threading.Event()
        self.changed = threading.Condition()
        self.handled = 0
        self.busy = False

    @property
    def info(self) -> NodeInfo:
        return self.endpoint.info

    # ------------------------------------------------------------- lifecycle
    def start(self) -> "NodeRuntime":
        self._spawn(self._work, "worker")
        if self.listener is not None:
            self._spawn(self._accept_loop, "listener")
        return self

    def _spawn(self, target, name, *args) -> None:
        t = threading.Thread(target=target, args=args, name=f"{self.info.node_id[:8]}-{name}", daemon=True)
        t.start()
        self._threads.append(t)

    def stop(self) -> None:
        self._stopping.set()
        self.inbox.put(None)
        if self.listener is not None:
            try:
                self.listener.close()
            except OSError:
                pass
        with self._lock:
            conns = list(self.conns.values())
            self.conns.clear()
        for c in conns:
            c.close()

    # ------------------------------------------------------------ connections
    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                sock, _ = self.listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._spawn(self._read_loop, "reader", Connection(sock))

    def _read_loop(self, conn: Connection) -> None:
        while not self._stopping.is_set():
            try:
                msg = conn.recv()
            except PeerClosed:
                break
            except MtfsError as exc:
                log.warning("dropping connection after bad frame: %s", exc)
                conn.close()
                break
            if msg.variant == Variant.APP and msg.tag == Tag.HELLO:
                self._on_hello(conn, msg)
                continue
            if conn.peer is None:
                log.warning("frame before HELLO; closing")
                conn.close()
                break
            self.inbox.put((conn.peer.node_id, msg))
        with self._lock:
            if conn.peer is not None and self.conns.get(conn.peer.node_id) is conn:
                del self.conns[conn.peer.node_id]

    def _on_hello(self, conn: Connection, msg: Message) -> None:
        peer = NodeInfo.from_dict(parse_app(msg.payload)[1])
        first = conn.peer is None
        conn.peer = peer
        with self._lock:
            self.addresses[peer.node_id] = peer
            self.conns.setdefault(peer.node_id, conn)
            self._hello_seq += 1
            seq = self._hello_seq
        if first and not conn.dialed:
            try:
                conn.send(_hello(self.info, seq))
            except PeerClosed:
                pass

    def dial(self, target: NodeInfo) -> Connection:
        conn = connect(target.host, target.port, attempts=self.dial_attempts, base=self.dial_base)
        conn.dialed = True
        conn.peer = target if target.node_id else None
        with self._lock:
            self._hello_seq += 1
            seq = self._hello_seq
        conn.send(_hello(self.info, seq))
        self._spawn(self._read_loop, "reader", conn)
        return conn

    def _address(self, dest) -> Optional[NodeInfo]:
        if isinstance(dest, NodeInfo):
            return dest
        info = self.endpoint.contact(dest) if hasattr(self.endpoint, "contact") else None
        return info or self.addresses.get(dest)

    def send_to(self, dest, msg: Message) -> bool:
        """Deliver to a node id or NodeInfo; False when the peer cannot be reached."""
        node_id = dest.node_id if isinstance(dest, NodeInfo) else dest
        with self._lock:
            conn = self.conns.get(node_id)
        if conn is None or conn.closed:
            target = self._address(dest)
            if target is None:
                log.warning("no address for %s", node_id[:8])
                return False
            try:
                conn = self.dial(target)
            except ConnectionRefused as exc:
                log.info("cannot reach %s: %s", node_id[:8], exc)
                return False
            with self._lock:
                self.conns[node_id] = conn
        try:
            conn.send(msg)
            return True
        except PeerClosed:
            with self._lock:
                self.conns.pop(node_id, None)
            return False

    # ----------------------------------------------------------------- worker
    def _work(self) -> None:
        while True:
            item = self.inbox.get()
            if item is None:
                return
            self.busy = True
            try:
                if callable(item):
                    out = item() or []
                else:
                    sender, msg = item
                    out = self.endpoint.handle_message(sender, msg)
                for dest, m in out:
                    self.send_to(dest, m)
            except Exception:  # keep serving; one bad message must not kill the node
                log.exception("handler failed")
            finally:
                self.busy = False
                with self.changed:
                    self.handled += 1
                    self.changed.notify_all()

    def learn(self, info: NodeInfo) -> None:
        """Record a peer address before any connection to it exists."""
        with self._lock:
            self.addresses[info.node_id] = info

    def call(self, fn: Callable[[], list]) -> None:
        """Run ``fn`` on the worker thread; it returns outbound ``(dest, msg)`` pairs."""
        self.inbox.put(fn)

    def idle(self) -> bool:
        return self.inbox.empty() and not self.busy


def probe(host: str, port: int, attempts: int = BACKOFF_ATTEMPTS, timeout: float = 5.0) -> NodeInfo:
    """Learn the identity of the node listening at ``host:port``."""
    conn = connect(host, port, attempts=attempts)
    try:
        anon = NodeInfo("00" * 32, "0.0.0.0", 0)
        conn.send(_hello(anon, 0))
        conn.sock.settimeout(timeout)
        try:
            msg = conn.recv()
        except (PeerClosed, OSError) as exc:
            raise UnreachableNode(f"{host}:{port}: {exc}") from exc
        if msg.variant != Variant.APP or msg.tag != Tag.HELLO:
            raise UnreachableNode(f"{host}:{port} did not answer HELLO")
        return NodeInfo.from_dict(parse_app(msg.payload)[1])
    finally:
        conn.close()


class TcpGateway:
    """Request/response over TCP for a ClientEndpoint hosted in its own runtime."""

    def __init__(self, client: ClientEndpoint, timeout: float = 10.0, dial_attempts: int = 2):
        self.client = client
        self.timeout = timeout
        self.runtime = NodeRuntime(client, dial_attempts=dial_attempts, dial_base=0.05).start()

    def request_all(self, pairs) -> list:
        pairs = list(pairs)
        pending = []
        for dest, msg in pairs:
            if self.runtime.send_to(dest, msg):
                pending.append(msg.msg_id.hex())
        deadline = time.monotonic() + self.timeout
        with self.runtime.changed:
            while not all(k in self.client.replies for k in pending):
                left = deadline - time.monotonic()
                if left <= 0:
                    break
                self.runtime.changed.wait(left)
        return [self.client.take_reply(msg) for _, msg in pairs]

    def request(self, dest: NodeInfo, msg):
        reply = self.request_all([(dest, msg)])[0]
        if reply is None:
            raise UnreachableNode(dest.node_id)
        return reply

    def close(self) -> None:
        self.runtime.stop()


def node_identity(label: str) -> str:
    return crypto.keygen(seed=label).public.digest()


class TcpCluster:
    """N storage nodes on loopback, joined sequentially, sharing one in-process ledger."""

    def __init__(
        self,
        n: int = 5,
        seed: int = 0,
        redundancy: Optional[RedundancyConfig] = None,
        policy: Optional[ReplicationPolicy] = None,
        k: int = 2,
        ledger: Optional[Ledger] = None,
        data_dir: Optional[Path] = None,
        host: str = "127.0.0.1",
    ):
        self.seed = seed
        self.redundancy = redundancy or RedundancyConfig()
        self.policy = policy or ReplicationPolicy()
        self.k = k
        self.host = host
        self.data_dir = Path(data_dir) if data_dir is not None else None
        self.ledger = ledger or Ledger()
        self.runtimes: list = []
        self._gateways: list = []
        try:
            for _ in range(n):
                self.add_node()
        except BaseException:
            self.close()
            raise

    @property
    def nodes(self) -> list:
        return [rt.endpoint for rt in self.runtimes]

    def add_node(self) -> StorageNode:
        idx = len(self.runtimes)
        srv = listen(self.host, 0)
        port = srv.getsockname()[1]
        info = NodeInfo(node_identity(f"sim-{self.seed}-node-{idx}"), self.host, port)
        store = ObjectStore(self.data_dir / f"node{idx}") if self.data_dir is not None else None
        node = StorageNode(info, store=store, policy=self.policy, redundancy=self.redundancy, k=self.k,
                           rng=random.Random(f"{self.seed}-nonce-{idx}"))
        rt = NodeRuntime(node, srv, dial_attempts=3, dial_base=0.05).start()
        self.runtimes.append(rt)
        if idx == 0:
            rt.call(lambda: node.bootstrap() or [])
        else:
            contact = self.runtimes[0].endpoint.info
            rt.learn(contact)
            rt.call(lambda: node.start_join(contact))
        self.settle()
        if not node.joined:
            raise node.join_error or JoinFailed(info.node_id)
        return node

    def settle(self, timeout: float = 30.0, quiet: float = 0.05) -> None:
        """Wait until every runtime has been idle with no new messages for ``quiet`` seconds."""
        deadline = time.monotonic() + timeout
        last = None
        while time.monotonic() < deadline:
            snapshot = sum(rt.handled for rt in self.runtimes + [g.runtime for g in self._gateways])
            if all(rt.idle() for rt in self.runtimes) and snapshot == last:
                return
            last = snapshot
            time.sleep(quiet)
        raise TimeoutError("cluster did not quiesce")

    # scenario backend interface
    def gateway(self, label: str) -> TcpGateway:
        client = ClientEndpoint(NodeInfo(node_identity(f"sim-{self.seed}-client-{label}"), self.host, 0))
        gw = TcpGateway(client)
        self._gateways.append(gw)
        return gw

    def entry(self, index: int) -> NodeInfo:
        return self.runtimes[index].endpoint.info

    def stop_node(self, index: int) -> None:
        self.runtimes[index].stop()

    def close(self) -> None:
        for gw in self._gateways:
            gw.close()
        for rt in self.runtimes:
            rt.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_script_tcp(script: str, seed: int = 0, base_dir=None, **cluster_kw):
    """Run the join and user commands of a scenario script on a loopback cluster."""
    from .errors import ScenarioError
    from .simnet import ScenarioResult, UserSteps, parse_script

    steps = parse_script(script)
    cluster = TcpCluster(0, seed=seed, **cluster_kw)
    result = ScenarioResult(network=cluster)
    users = UserSteps(cluster, seed, base_dir)
    try:
        for step in steps:
            if step.command == "join":
                for _ in range(step.args["count"]):
                    cluster.add_node()
            elif step.command == "settle":
                cluster.settle()
            elif not users.execute(step, result):
                raise ScenarioError(f"line {step.lineno}: {step.command!r} is simulator-only")
        cluster.settle()
    except BaseException:
        cluster.close()
        raise
    return result
