import math

import pytest
from hypothesis import given, strategies as st

from mtfs import crypto
from mtfs.errors import AlreadyBootstrapped, InvalidGroupId, KTooSmall, NoOpenBranch
from mtfs.overlay import (
    Message,
    NodeInfo,
    OpenBranch,
    RedundancyConfig,
    TreeNode,
    Variant,
    check_group_id,
    gids_within,
    select_branch,
    tree_distance,
    true_open_slots,
)
from mtfs.simnet import SimConfig, Simulator

from oracles import bfs, level_order_gids, tree_adjacency


def info(label):
    return NodeInfo(crypto.keygen(seed=label).public.digest())


def test_group_id_validation():
    assert check_group_id("") == ""
    assert check_group_id("0101") == "0101"
    with pytest.raises(InvalidGroupId):
        check_group_id("012")


@given(st.text(alphabet="01", max_size=8), st.text(alphabet="01", max_size=8))
def test_tree_distance_matches_bfs(a, b):
    universe = {a[:i] for i in range(len(a) + 1)} | {b[:i] for i in range(len(b) + 1)}
    assert tree_distance(a, b) == bfs(tree_adjacency(universe), a)[b]


def test_gids_within_is_ball():
    universe = {g for d in range(6) for g in (format(i, f"0{d}b") if d else "" for i in range(2**d))}
    dist = bfs(tree_adjacency(universe), "01")
    expected = {g for g, d in dist.items() if d <= 2}
    assert gids_within("01", 2) == expected


def test_select_branch_rules():
    L, R = OpenBranch("", 0), OpenBranch("", 1)
    assert select_branch({L, R}) == L
    assert select_branch({OpenBranch("0", 0), R}) == R
    assert select_branch({OpenBranch("1", 0), OpenBranch("0", 1)}) == OpenBranch("0", 1)
    with pytest.raises(NoOpenBranch):
        select_branch(set())
    with pytest.raises(NoOpenBranch):
        select_branch({L}, exclude={L.key})


@given(st.sets(st.tuples(st.text(alphabet="01", max_size=5), st.integers(0, 1)), min_size=1))
def test_select_branch_matches_sort_oracle(keys):
    branches = [OpenBranch(g, s) for g, s in keys]
    best = sorted(keys, key=lambda k: (len(k[0]), k[0], k[1]))[0]
    assert select_branch(branches).key == best


def test_bootstrap():
    node = TreeNode(info("root"))
    node.bootstrap()
    assert node.group_id == "" and node.joined
    assert set(node.open) == {("", 0), ("", 1)}
    with pytest.raises(AlreadyBootstrapped):
        node.bootstrap()


def test_k_too_small():
    with pytest.raises(KTooSmall):
        TreeNode(info("x"), k=1)
    node = TreeNode(info("x"))
    node.bootstrap()
    with pytest.raises(KTooSmall):
        node.neighbors_within(1)


def test_redundancy_config_validation():
    with pytest.raises(ValueError):
        RedundancyConfig("mesh")
    with pytest.raises(ValueError):
        RedundancyConfig("cluster", cluster_size=4)
    with pytest.raises(ValueError):
        RedundancyConfig("extra_links", link_radius=1)


def test_join_sequence_gids():
    sim = Simulator(SimConfig(seed=1, node_count=4))
    assert [n.group_id for n in sim.nodes] == ["", "0", "1", "00"]


@pytest.mark.parametrize("n", [1, 2, 5, 16, 33, 100])
def test_sequential_joins_fill_level_order(n):
    sim = Simulator(SimConfig(seed=n, node_count=n))
    assert [x.group_id for x in sim.nodes] == level_order_gids(n)
    assert max(len(x.group_id) for x in sim.nodes) == math.floor(math.log2(n))


def test_open_branch_views_converge():
    sim = Simulator(SimConfig(seed=3, node_count=12))
    truth = true_open_slots(n.group_id for n in sim.nodes)
    for node in sim.nodes:
        assert set(node.open) == truth


def test_neighbor_tables_match_bfs():
    sim = Simulator(SimConfig(seed=2, node_count=7))
    adj = tree_adjacency(n.group_id for n in sim.nodes)
    root = sim.node_by_gid("")
    assert root.neighbors_within(2).group_ids() == set(level_order_gids(7))
    leaf = sim.node_by_gid("00")
    assert leaf.neighbors_within(2).group_ids() == {"00", "0", "01", ""}
    for node in sim.nodes:
        for k in (2, 3):
            dist = bfs(adj, node.group_id)
            table = node.neighbors_within(k)
            assert table.group_ids() == {g for g, d in dist.items() if d <= k}
            for hop, members in table.entries.items():
                assert all(dist[m.group_id] == hop for m in members)


def test_concurrent_join_race_resolves_uniquely():
    sim = Simulator(SimConfig(seed=5, node_count=3))
    fresh = sim.join_concurrent(4)
    gids = [n.group_id for n in sim.nodes]
    assert len(set(gids)) == len(gids) == 7
    assert sorted(gids) == sorted(level_order_gids(7))
    assert any(n._attempts > 1 for n in fresh)


def test_join_reject_for_taken_branch():
    sim = Simulator(SimConfig(seed=1, node_count=2))
    root = sim.root
    outsider = TreeNode(info("late"))
    outsider._contact = root.info
    outsider._pending = OpenBranch("", 0, root.info)
    req = outsider.app(0x04, {"parent": "", "side": 0, "node": outsider.info.to_dict()})
    (dest, reply), = root.handle_message(outsider.node_id, req)
    assert dest == outsider.node_id and reply.tag == 0x84


def test_group_id_ignored_by_non_joiner():
    sim = Simulator(SimConfig(seed=1, node_count=3))
    node = sim.nodes[1]
    stray = Message(Variant.GROUP_ID, b"\x01" * 32, b"\x02" * 32, group_id="11")
    assert node.handle_message(sim.root.node_id, stray) == []
    assert node.group_id == "0"


def test_discarded_and_available_update_view():
    node = TreeNode(info("solo"))
    node.bootstrap()
    disc = Message(Variant.DISCARDED_BRANCHES, b"\x03" * 32, b"\x04" * 32, branches=(OpenBranch("", 0),))
    node.handle_message("peer", disc)
    assert ("", 0) not in node.open
    child = NodeInfo("ab" * 32, group_id="1")
    avail = Message(Variant.AVAILABLE_BRANCHES, b"\x05" * 32, b"\x06" * 32,
                    branches=(OpenBranch("1", 0, child), OpenBranch("1", 1, child)))
    node.handle_message("peer", avail)
    assert {("1", 0), ("1", 1)} <= set(node.open)


def test_duplicate_broadcast_not_forwarded():
    sim = Simulator(SimConfig(seed=1, node_count=3))
    msg, _ = sim.root.originate(b"x")
    left = sim.node_by_gid("0")
    assert left.handle_message(sim.root.node_id, msg) == []  # leaf: no other links
    again = left.handle_message(sim.root.node_id, msg)
    assert again == [] and left.duplicates == 1


def test_unknown_variant_ignored():
    node = TreeNode(info("solo"))
    node.bootstrap()
    assert node.handle_message("x", Message(9, b"\x00" * 32, b"\x00" * 32)) == []


def test_cluster_mode_fills_positions():
    sim = Simulator(SimConfig(seed=4, node_count=9, redundancy=RedundancyConfig("cluster")))
    counts = {}
    for n in sim.nodes:
        counts[n.group_id] = counts.get(n.group_id, 0) + 1
    assert counts == {"": 3, "0": 3, "1": 3}
    for n in sim.nodes:
        same = [m for m in n.links() if sim.endpoints[m].group_id == n.group_id]
        assert len(same) == 2


def test_extra_links_connect_radius_two():
    sim = Simulator(SimConfig(seed=4, node_count=15, redundancy=RedundancyConfig("extra_links")))
    node = sim.node_by_gid("01")
    linked = {sim.endpoints[m].group_id for m in node.links()}
    existing = {n.group_id for n in sim.nodes}
    assert linked == (gids_within("01", 2) & existing) - {"01"}


def test_seen_cache_is_bounded():
    node = TreeNode(info("solo"), seen_capacity=4)
    node.bootstrap()
    for i in range(10):
        node.handle_message("x", Message(Variant.DISCARDED_BRANCHES, bytes([i]) * 32, b"\x00" * 32))
    assert len(node.seen) == 4
