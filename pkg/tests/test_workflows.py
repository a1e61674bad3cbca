import pytest

from mtfs import crypto, merkle
from mtfs.errors import DuplicateName, LedgerDown, NotAddressee, NotFound, WrongKey
from mtfs.ledger import FileSend, Transaction
from mtfs.merkle import CAPSULE_SUFFIX, OBJECT_SIZE
from mtfs.namespace import FILE, FOLDER
from mtfs.routing import placement_target
from mtfs.simnet import SimConfig, Simulator
from mtfs.workflows import UserSession, network_stats


@pytest.fixture(scope="module")
def net():
    sim = Simulator(SimConfig(seed=11, node_count=15))
    return sim


def session(sim, name, entry=0):
    kp = crypto.keygen(seed=f"wf-{name}")
    return UserSession(kp, sim.ledger, sim.gateway(name), sim.nodes[entry].info, seed=name)


def test_put_get_ls_nested(net):
    alice = session(net, "alice")
    small, big = b"hello", bytes(range(256)) * (OBJECT_SIZE // 256 * 2 + 3)
    alice.put_file("/docs/a.txt", small)
    alice.put_file("/docs/deep/b.bin", big)
    assert alice.get_file("/docs/a.txt") == small
    assert alice.get_file("docs/deep/b.bin") == big
    top = alice.ls()
    assert [(r.name, r.kind) for r in top] == [("docs", FOLDER)]
    docs = {r.name: r for r in alice.ls("/docs")}
    assert docs["a.txt"].kind == FILE and docs["a.txt"].size == 5
    assert docs["deep"].kind == FOLDER
    with pytest.raises(DuplicateName):
        alice.put_file("/docs/a.txt", b"again")
    with pytest.raises(NotFound):
        alice.get_file("/docs/missing")
    with pytest.raises(NotFound):
        alice.get_file("/docs")
    with pytest.raises(NotFound):
        alice.ls("/nowhere")


def test_fresh_session_reads_root_from_ledger(net):
    writer = session(net, "carol")
    writer.put_file("/x", b"persisted")
    reader = UserSession(writer.keypair, net.ledger, net.gateway("carol-2"), net.nodes[7].info)
    assert reader.get_file("/x") == b"persisted"


def test_other_user_cannot_decrypt(net):
    dave = session(net, "dave")
    dave.put_file("/secret", b"s3cret")
    entry = dave._entry("/secret")
    eve = session(net, "eve")
    with pytest.raises(WrongKey):
        eve.read_entry(entry)


def test_share_and_accept(net):
    bob = session(net, "bob", entry=3)
    frank = session(net, "frank", entry=12)
    bob.put_file("/report.pdf", b"quarterly numbers" * 1000)
    before = {k: n.read_key(k) for n in net.nodes for k in n.stored_keys() if not n.cheat}
    bob.share_file(frank.keypair.public, "/report.pdf")
    grants = frank.pending_shares()
    assert len(grants) == 1 and grants[0].body.name == "report.pdf"
    with pytest.raises(NotAddressee):
        bob.accept_share(grants[0])
    frank.accept_share(grants[0])
    assert frank.get_file("/report.pdf") == b"quarterly numbers" * 1000
    assert frank.pending_shares() == []
    with pytest.raises(DuplicateName):
        frank.accept_share(grants[0])
    # sharing never rewrote anything bob had stored
    after = {k: n.read_key(k) for n in net.nodes for k in n.stored_keys() if not n.cheat}
    assert all(after[k] == v for k, v in before.items())
    # bob still reads his own copy
    assert bob.get_file("/report.pdf") == b"quarterly numbers" * 1000


def test_large_put_placement(net):
    kim = session(net, "kim")
    content = bytes(range(256)) * (2_500_000 // 256) + b"tail"
    kim.put_file("/big", content)
    entry = kim._entry("/big")
    manifest_key = entry.object_ref + merkle.MANIFEST_SUFFIX
    manifest = merkle.MerkleManifest.from_bytes(net.holders_of(manifest_key)[0].read_key(manifest_key))
    assert len(manifest.leaf_ids) == 3
    members = {n.group_id: n.info for n in net.nodes}
    for key in [*manifest.leaf_ids, manifest_key, entry.capsule_ref]:
        holders = net.holders_of(key)
        assert len(holders) == 3
        assert placement_target(key, members).node_id in {h.node_id for h in holders}


def test_third_party_cannot_use_grant(net):
    lee, max_, ned = session(net, "lee"), session(net, "max"), session(net, "ned")
    lee.put_file("/g", b"granted")
    lee.share_file(max_.keypair.public, "/g")
    grant = max_.pending_shares()[0]
    # ned sees the public transaction but the capsule is bound to max
    capsule = ned.storage.fetch_capsule(grant.body.reenc_capsule_ref)
    ct = ned.storage.fetch_content(grant.body.object_ref, grant.body.size + crypto.AEAD_OVERHEAD)
    with pytest.raises(WrongKey):
        crypto.decrypt(ned.keypair.private, capsule, ct)
    holders_before = {n.node_id for n in net.holders_of(grant.body.object_ref)}
    max_.accept_share(grant)
    assert {n.node_id for n in net.holders_of(grant.body.object_ref)} == holders_before
    assert [r.name for r in max_.ls()] == ["g"]


def test_share_to_self(net):
    olga = session(net, "olga")
    olga.put_file("/mine", b"self")
    olga.share_file(olga.keypair.public, "/mine")
    olga.accept_share(olga.pending_shares()[0], name="copy")
    assert olga.get_file("/copy") == b"self"


def test_accept_rejects_non_share(net):
    gina = session(net, "gina")
    other = crypto.keygen(seed="wf-other")
    wrong = Transaction.create(
        other.private, FileSend(other.public.digest(), other.public.digest(), "11" * 32, "22" * 32, "n", 1)
    )
    with pytest.raises(NotAddressee):
        gina.accept_share(wrong)


def test_no_dangling_refs(net):
    hank = session(net, "hank")
    hank.put_file("/a/b/c", b"1")
    hank.put_file("/a/d", b"2" * (OBJECT_SIZE + 1))

    def walk(path):
        for row in hank.ls(path):
            child = f"{path}/{row.name}"
            holders = net.holders_of(row.object_ref) or net.holders_of(row.object_ref + merkle.MANIFEST_SUFFIX)
            assert holders, child
            if row.kind == FOLDER:
                walk(child)

    walk("")
    root = net.ledger.latest_root(hank.owner).root_ref
    assert net.holders_of(root + CAPSULE_SUFFIX)


def test_corrupt_replica_still_readable_and_flagged():
    sim = Simulator(SimConfig(seed=21, node_count=15))
    ivy = session(sim, "ivy")
    data = b"z" * 3000
    ivy.put_file("/f", data)
    ref = ivy._entry("/f").object_ref
    holders = sim.holders_of(ref)
    assert len(holders) == 3
    victim = holders[-1]
    oid = victim.store.resolve(ref)
    victim.store.inject(oid, b"\x00bad")
    ivy.root_cache = None
    assert ivy.get_file("/f") == data
    report = sim.audit_round()
    assert {h for k, h, _ in report.failures if k == ref} == {victim.node_id}
    healed = sim.holders_of(ref)
    assert len(healed) == 3 and victim not in healed
    assert all(merkle.verify_object(ref, n.read_key(ref)) for n in healed)
    assert not sim.audit_round().failures


def test_ledger_down_surfaces(net):
    jo = session(net, "jo")
    net.ledger.available = False
    try:
        with pytest.raises(LedgerDown):
            jo.put_file("/p", b"q")
    finally:
        net.ledger.available = True


def test_network_stats(net):
    gw = net.gateway("stats")
    stats = network_stats(gw, net.nodes[0].info)
    assert stats["nodes"] == 15 and stats["height"] == 3
    assert sum(stats["objects_per_depth"].values()) > 0


def test_put_and_get_with_dead_nodes():
    sim = Simulator(SimConfig(seed=31, node_count=15))
    for gid in ("0", "101"):
        sim.fail(sim.node_by_gid(gid).node_id)
    pat = session(sim, "pat", entry=2)
    files = {f"/f{i}": bytes([i]) * (i * 997 + 1) for i in range(12)}
    for path, data in files.items():
        pat.put_file(path, data)
    fresh = UserSession(pat.keypair, sim.ledger, sim.gateway("pat-2"), sim.nodes[6].info)
    assert all(fresh.get_file(p) == d for p, d in files.items())
