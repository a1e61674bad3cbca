"""Content-addressed object store and Merkle chunking of encrypted content.

Every object is at most ``OBJECT_SIZE`` bytes and is named by the SHA-256 of
its bytes (lowercase hex).  Content larger than one object is split greedily
into full-size leaves; a binary Merkle tree over the leaf digests binds them
to a single root id.  An unpaired node at any level is promoted unchanged.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Union

from .errors import (
    EmptyLeafSet,
    IntegrityFailure,
    MalformedManifest,
    MissingObject,
    ObjectTooLarge,
    RootMismatch,
)

OBJECT_SIZE = 1024 * 1024
MANIFEST_SUFFIX = "_mt"
CAPSULE_SUFFIX = "_capsule"


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def object_id(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def canonical_json(value) -> bytes:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode()


@dataclass(frozen=True)
class StoredObject:
    id: str
    data: bytes = field(repr=False)

    def __post_init__(self):
        if len(self.data) > OBJECT_SIZE:
            raise ObjectTooLarge(len(self.data))


@dataclass(frozen=True)
class MerkleManifest:
    root: str
    total_size: int
    leaf_ids: tuple
    levels: tuple  # levels[0] == leaf_ids, levels[-1] == (root,)

    @classmethod
    def build(cls, leaf_ids: Iterable[str], total_size: int) -> "MerkleManifest":
        levels = merkle_levels(list(leaf_ids))
        return cls(levels[-1][0], total_size, tuple(levels[0]), tuple(tuple(lv) for lv in levels))

    def to_bytes(self) -> bytes:
        return canonical_json(
            {
                "version": 1,
                "total_size": self.total_size,
                "leaves": list(self.leaf_ids),
                "levels": [list(lv) for lv in self.levels],
            }
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "MerkleManifest":
        try:
            rec = json.loads(data)
            if rec["version"] != 1:
                raise MalformedManifest(f"unsupported manifest version {rec['version']}")
            leaves = tuple(rec["leaves"])
            levels = tuple(tuple(lv) for lv in rec["levels"])
            total = int(rec["total_size"])
        except MalformedManifest:
            raise
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedManifest(str(exc)) from exc
        if not levels or len(levels[-1]) != 1 or levels[0] != leaves:
            raise MalformedManifest("inconsistent levels")
        return cls(levels[-1][0], total, leaves, levels)

    def check(self) -> None:
        """Raise RootMismatch unless the levels recompute from the leaves."""
        expected = merkle_levels(list(self.leaf_ids))
        if tuple(tuple(lv) for lv in expected) != self.levels or expected[-1][0] != self.root:
            raise RootMismatch(self.root)
        if len(self.leaf_ids) != leaf_count(self.total_size):
            raise RootMismatch(self.root)


@dataclass(frozen=True)
class ChunkingResult:
    root: str
    leaves: tuple
    manifest: Optional[MerkleManifest] = None

    @property
    def total_size(self) -> int:
        return sum(len(leaf.data) for leaf in self.leaves)

    def objects(self) -> list:
        """(key, bytes) pairs to store: leaves, then the manifest under its ``_mt`` name."""
        out = [(leaf.id, leaf.data) for leaf in self.leaves]
        if self.manifest is not None:
            out.append((self.root + MANIFEST_SUFFIX, self.manifest.to_bytes()))
        return out


def leaf_count(size: int) -> int:
    return max(1, -(-size // OBJECT_SIZE))


def _parent(left: str, right: str) -> str:
    return hashlib.sha256(bytes.fromhex(left) + bytes.fromhex(right)).hexdigest()


def merkle_levels(leaf_ids: list) -> list:
    if not leaf_ids:
        raise EmptyLeafSet()
    levels = [list(leaf_ids)]
    while len(levels[-1]) > 1:
        cur = levels[-1]
        nxt = [_parent(cur[i], cur[i + 1]) for i in range(0, len(cur) - 1, 2)]
        if len(cur) % 2:
            nxt.append(cur[-1])
        levels.append(nxt)
    return levels


def build_root(leaf_ids: Iterable[str]) -> str:
    return merkle_levels(list(leaf_ids))[-1][0]


def chunk(content: bytes) -> ChunkingResult:
    content = bytes(content)
    if len(content) <= OBJECT_SIZE:
        leaf = StoredObject(object_id(content), content)
        return ChunkingResult(leaf.id, (leaf,), None)
    leaves = []
    for off in range(0, len(content), OBJECT_SIZE):
        piece = content[off : off + OBJECT_SIZE]
        leaves.append(StoredObject(object_id(piece), piece))
    manifest = MerkleManifest.build([leaf.id for leaf in leaves], len(content))
    return ChunkingResult(manifest.root, tuple(leaves), manifest)


def verify_object(oid: str, data: bytes) -> bool:
    return object_id(data) == oid


def reassemble(
    descriptor: Union[ChunkingResult, MerkleManifest, str],
    fetch: Callable[[str], Optional[bytes]],
) -> bytes:
    """Fetch and verify every leaf named by ``descriptor`` and return the content.

    ``descriptor`` is a chunking result, a manifest, or the root id of a
    single-object payload.  ``fetch`` may return None or raise KeyError for
    absent objects.
    """
    if isinstance(descriptor, ChunkingResult):
        descriptor = descriptor.manifest or descriptor.root
    if isinstance(descriptor, str):
        data = _fetch_verified(descriptor, fetch)
        return data
    manifest = descriptor
    manifest.check()
    parts = [_fetch_verified(lid, fetch) for lid in manifest.leaf_ids]
    content = b"".join(parts)
    if len(content) != manifest.total_size:
        raise RootMismatch(manifest.root)
    return content


def _fetch_verified(oid: str, fetch) -> bytes:
    try:
        data = fetch(oid)
    except KeyError:
        data = None
    if data is None:
        raise MissingObject(oid)
    if not verify_object(oid, data):
        raise IntegrityFailure(oid)
    return data


class ObjectStore:
    """Flat object store: ``<data_dir>/objects/<hex id>``; in memory when data_dir is None.

    Named aliases (``<root>_mt``, ``<root>_capsule``) point at ordinary
    objects.  On disk they are stored as files next to the objects.
    """

    def __init__(self, data_dir: Optional[Union[str, Path]] = None):
        self._lock = threading.Lock()
        self._dir = None
        self._mem: dict = {}
        self._names: dict = {}
        if data_dir is not None:
            self._dir = Path(data_dir) / "objects"
            self._dir.mkdir(parents=True, exist_ok=True)

    # raw slot access -------------------------------------------------------
    def _read(self, key: str) -> Optional[bytes]:
        if self._dir is None:
            return self._mem.get(key)
        try:
            return (self._dir / key).read_bytes()
        except FileNotFoundError:
            return None

    def _write(self, key: str, data: bytes) -> None:
        if self._dir is None:
            self._mem[key] = data
            return
        tmp = self._dir / f".{key}.{os.getpid()}.{threading.get_ident()}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, self._dir / key)

    def _remove(self, key: str) -> bool:
        if self._dir is None:
            return self._mem.pop(key, None) is not None
        try:
            (self._dir / key).unlink()
            return True
        except FileNotFoundError:
            return False

    # public API ------------------------------------------------------------
    def put(self, data: bytes) -> str:
        data = bytes(data)
        if len(data) > OBJECT_SIZE:
            raise ObjectTooLarge(len(data))
        oid = object_id(data)
        with self._lock:
            existing = self._read(oid)
            if existing is None or not verify_object(oid, existing):
                self._write(oid, data)
        return oid

    def get(self, oid: str) -> bytes:
        data = self._read(oid)
        if data is None:
            raise MissingObject(oid)
        return data

    def has(self, oid: str) -> bool:
        if self._dir is None:
            return oid in self._mem
        return (self._dir / oid).exists()

    def delete(self, oid: str) -> bool:
        with self._lock:
            return self._remove(oid)

    def ids(self) -> list:
        if self._dir is None:
            keys = list(self._mem)
        else:
            keys = [p.name for p in self._dir.iterdir() if not p.name.startswith(".")]
        return sorted(k for k in keys if len(k) == 64)

    # named aliases ---------------------------------------------------------
    def put_named(self, name: str, data: bytes) -> str:
        """Store ``data`` as an object and alias it under ``name``."""
        oid = self.put(data)
        with self._lock:
            if self._dir is None:
                self._names[name] = oid
            else:
                self._write(name, oid.encode())
        return oid

    def resolve(self, key: str) -> Optional[str]:
        """Map a key (object id or alias) to an object id, or None."""
        if len(key) == 64:
            return key if self.has(key) else None
        if self._dir is None:
            return self._names.get(key)
        raw = self._read(key)
        return raw.decode() if raw is not None else None

    def get_key(self, key: str) -> bytes:
        oid = self.resolve(key)
        if oid is None:
            raise MissingObject(key)
        return self.get(oid)

    def names(self) -> list:
        if self._dir is None:
            return sorted(self._names)
        return sorted(p.name for p in self._dir.iterdir() if "_" in p.name and not p.name.startswith("."))

    def inject(self, oid: str, data: bytes) -> None:
        """Overwrite a slot without verification (fault injection)."""
        with self._lock:
            self._write(oid, data)
