import threading

import pytest

from mtfs import crypto, transport
from mtfs.errors import ConnectionRefused, PeerClosed, UnreachableNode
from mtfs.overlay import Message, NodeInfo, Variant
from mtfs.simnet import SimConfig, Simulator
from mtfs.transport import TcpCluster, backoff_delays, connect, listen, probe
from mtfs.workflows import UserSession, network_stats


def _free_port():
    srv = listen("127.0.0.1", 0)
    port = srv.getsockname()[1]
    srv.close()
    return port


def test_backoff_schedule():
    assert backoff_delays(6, 0.2, 10.0) == [0.2, 0.4, 0.8, 1.6, 3.2]
    assert backoff_delays(10, 1.0, 10.0)[-1] == 10.0
    assert backoff_delays(1) == []


def test_connection_refused_uses_backoff():
    slept = []
    with pytest.raises(ConnectionRefused):
        connect("127.0.0.1", _free_port(), attempts=4, base=0.5, sleep=slept.append)
    assert slept == [0.5, 1.0, 2.0]


def _echo_server(srv, count):
    sock, _ = srv.accept()
    conn = transport.Connection(sock)
    for _ in range(count):
        conn.send(conn.recv())
    conn.close()


def test_loopback_echo_and_fifo():
    srv = listen("127.0.0.1", 0)
    port = srv.getsockname()[1]
    n = 1000
    t = threading.Thread(target=_echo_server, args=(srv, n + 1), daemon=True)
    t.start()
    conn = connect("127.0.0.1", port)
    probe_msg = Message(Variant.GROUP_ID, b"\x01" * 32, b"\x02" * 32, group_id="0110")
    transport.send(conn, probe_msg)
    assert transport.recv(conn) == probe_msg

    def writer():
        for i in range(n):
            conn.send(Message(Variant.GROUP_ID, i.to_bytes(32, "big"), b"\x02" * 32, group_id=format(i, "b")))

    w = threading.Thread(target=writer)
    w.start()
    got = [int.from_bytes(transport.recv(conn).msg_id, "big") for _ in range(n)]
    w.join()
    assert got == list(range(n))
    t.join(5)
    with pytest.raises(PeerClosed):
        conn.recv()
    conn.close()
    srv.close()


def test_cluster_probe_put_get_stats():
    with TcpCluster(5, seed=3) as cluster:
        gids = sorted(n.group_id for n in cluster.nodes)
        assert gids == sorted(["", "0", "1", "00", "01"])
        entry = cluster.entry(0)
        assert probe(entry.host, entry.port).node_id == entry.node_id
        kp = crypto.keygen(seed="tcp-user")
        s = UserSession(kp, cluster.ledger, cluster.gateway("u"), cluster.entry(4), seed="u")
        s.put_file("/a", b"over tcp" * 500)
        cluster.settle()
        assert s.get_file("/a") == b"over tcp" * 500
        stats = network_stats(cluster.gateway("s"), entry)
        assert stats["nodes"] == 5 and stats["height"] == 2


def test_unreachable_node_request():
    with TcpCluster(2, seed=8) as cluster:
        gw = cluster.gateway("x")
        gw.timeout = 0.5
        dead = NodeInfo("cd" * 32, "127.0.0.1", _free_port())
        with pytest.raises(UnreachableNode):
            gw.request(dead, gw.client.app(0x09, {}))


def test_same_ids_as_simulator():
    sim = Simulator(SimConfig(seed=6, node_count=3))
    with TcpCluster(3, seed=6) as cluster:
        assert [n.node_id for n in cluster.nodes] == [n.node_id for n in sim.nodes]
        assert [n.group_id for n in cluster.nodes] == [n.group_id for n in sim.nodes]
