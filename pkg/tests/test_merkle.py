import hashlib
import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from mtfs import merkle
from mtfs.errors import EmptyLeafSet, IntegrityFailure, MalformedManifest, MissingObject, ObjectTooLarge, RootMismatch
from mtfs.merkle import OBJECT_SIZE, ObjectStore, build_root, chunk, reassemble, verify_object

MiB = 1048576


def h(b: bytes) -> str:
    return hashlib.sha256(b).hexdigest()


def pair(a: str, b: str) -> str:
    return hashlib.sha256(bytes.fromhex(a) + bytes.fromhex(b)).hexdigest()


def test_object_size_constant():
    assert OBJECT_SIZE == 1024 * 1024


def test_empty_content_is_one_empty_leaf():
    r = chunk(b"")
    assert r.root == h(b"")
    assert [leaf.data for leaf in r.leaves] == [b""]
    assert r.manifest is None


def test_exactly_one_mib_has_no_manifest():
    data = bytes(MiB)
    r = chunk(data)
    assert len(r.leaves) == 1 and r.manifest is None and r.root == h(data)


def test_two_and_a_half_mb_splits_greedily():
    data = random.Random(1).randbytes(2_500_000)
    r = chunk(data)
    assert [len(leaf.data) for leaf in r.leaves] == [1048576, 1048576, 402848]
    assert r.manifest is not None
    assert r.manifest.total_size == 2_500_000
    ids = [h(leaf.data) for leaf in r.leaves]
    assert r.root == pair(pair(ids[0], ids[1]), ids[2])


def test_build_root_examples():
    h1, h2, h3 = h(b"1"), h(b"2"), h(b"3")
    assert build_root([h1]) == h1
    assert build_root([h1, h2]) == pair(h1, h2)
    assert build_root([h1, h2, h3]) == pair(pair(h1, h2), h3)
    with pytest.raises(EmptyLeafSet):
        build_root([])


def naive_root(ids):
    level = list(ids)
    while len(level) > 1:
        nxt = [pair(level[i], level[i + 1]) for i in range(0, len(level) - 1, 2)]
        if len(level) % 2:
            nxt.append(level[-1])
        level = nxt
    return level[0]


@given(st.lists(st.binary(max_size=8), min_size=1, max_size=40))
def test_build_root_matches_naive_fold(blobs):
    ids = [h(b) for b in blobs]
    assert build_root(ids) == naive_root(ids)


def test_manifest_levels_top_out_in_root():
    r = chunk(bytes(5 * MiB + 7))
    levels = r.manifest.levels
    assert levels[0] == r.manifest.leaf_ids
    assert levels[-1] == (r.root,)
    assert len(r.manifest.leaf_ids) == 6


def test_manifest_serialization_is_canonical():
    r = chunk(bytes(MiB + 1))
    raw = r.manifest.to_bytes()
    assert raw.startswith(b'{"leaves":[')
    assert b" " not in raw
    assert merkle.MerkleManifest.from_bytes(raw) == r.manifest
    assert b'"version":1' in raw


def test_manifest_rejects_tampering():
    r = chunk(bytes(MiB + 1))
    raw = r.manifest.to_bytes().replace(b'"total_size":1048577', b'"total_size":3145729')
    with pytest.raises((MalformedManifest, RootMismatch)):
        merkle.MerkleManifest.from_bytes(raw).check()
    with pytest.raises(MalformedManifest):
        merkle.MerkleManifest.from_bytes(b"not json")


def test_verify_object_examples():
    b = b"hello"
    assert verify_object(h(b), b)
    assert not verify_object(h(b), bytes([b[0] ^ 1]) + b[1:])
    assert verify_object(h(b""), b"")


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=3 * MiB + 10), st.integers(min_value=0, max_value=2**32))
def test_chunk_leaf_count_and_roundtrip(size, seed):
    data = random.Random(seed).randbytes(size)
    r = chunk(data)
    assert len(r.leaves) == max(1, math.ceil(size / MiB))
    assert b"".join(leaf.data for leaf in r.leaves) == data
    assert (r.manifest is not None) == (size > MiB)
    store = {leaf.id: leaf.data for leaf in r.leaves}
    assert reassemble(r, store.get) == data
    assert chunk(data).root == r.root


def test_reassemble_detects_corrupt_leaf():
    data = random.Random(2).randbytes(2_500_000)
    r = chunk(data)
    store = {leaf.id: leaf.data for leaf in r.leaves}
    bad = bytearray(store[r.leaves[1].id])
    bad[1234] ^= 0x10
    store[r.leaves[1].id] = bytes(bad)
    with pytest.raises(IntegrityFailure) as exc:
        reassemble(r.manifest, store.get)
    assert exc.value.object_id == r.leaves[1].id


def test_reassemble_missing_leaf():
    r = chunk(bytes(MiB + 5))
    store = {r.leaves[0].id: r.leaves[0].data}
    with pytest.raises(MissingObject):
        reassemble(r, store.get)


def test_reassemble_single_object_by_root():
    assert reassemble(h(b"abc"), {h(b"abc"): b"abc"}.get) == b"abc"


@pytest.fixture(params=["memory", "disk"])
def store(request, tmp_path):
    return ObjectStore() if request.param == "memory" else ObjectStore(tmp_path)


def test_store_put_get_has_delete(store):
    oid = store.put(b"payload")
    assert oid == h(b"payload")
    assert store.get(oid) == b"payload"
    assert store.has(oid)
    assert not store.has(h(b"other"))
    assert store.delete(oid)
    assert not store.delete(oid)
    with pytest.raises(MissingObject):
        store.get(oid)


def test_store_rejects_oversized(store):
    with pytest.raises(ObjectTooLarge):
        store.put(bytes(MiB + 1))


def test_store_named_aliases(store):
    oid = store.put_named("ab" * 32 + "_mt", b"manifest")
    assert store.resolve("ab" * 32 + "_mt") == oid
    assert store.get_key("ab" * 32 + "_mt") == b"manifest"
    assert store.resolve("cd" * 32 + "_capsule") is None


def test_store_put_repairs_corrupt_slot(store):
    oid = store.put(b"good")
    store.inject(oid, b"evil")
    # raw reads expose the damage; callers verify
    assert not verify_object(oid, store.get(oid))
    store.put(b"good")
    assert store.get(oid) == b"good"


def test_disk_layout(tmp_path):
    store = ObjectStore(tmp_path)
    oid = store.put(b"x")
    assert (tmp_path / "objects" / oid).read_bytes() == b"x"
    assert ObjectStore(tmp_path).get(oid) == b"x"
