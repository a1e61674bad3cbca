"""User flows: put, get, ls, share and accept, composed from the lower layers.

Everything crosses the network as request/reply messages through a
*gateway*: any object with ``client`` (a ClientEndpoint used to build
requests), ``request(dest, msg)`` and ``request_all(pairs)``.  The simulator
and the TCP transport both provide one, so these flows run unchanged on
either.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

from . import crypto, merkle
from .errors import (
    DuplicateName,
    IntegrityFailure,
    MissingObject,
    NameNotFound,
    NotAddressee,
    NotFound,
    UnreachableNode,
)
from .ledger import FileSend, Ledger, Receipt, RootPointer, StorageContract, Transaction
from .merkle import CAPSULE_SUFFIX, MANIFEST_SUFFIX, OBJECT_SIZE
from .namespace import (
    FILE,
    FOLDER,
    FolderEntry,
    FolderObject,
    add_entry,
    open_folder,
    replace_entry,
    seal_folder,
    split_path,
)
from .node import key_matches, sign_push
from .overlay import NodeInfo, Tag, parse_app
from .replication import AuditReport
from .routing import is_prefix_of, key_bits, outermost_node

log = logging.getLogger(__name__)


class StorageClient:
    """Locates, pushes and fetches objects on behalf of one key holder."""

    def __init__(self, gateway, entry: NodeInfo, signer: crypto.PrivateKey):
        self.gateway = gateway
        self.entry = entry
        self.signer = signer
        self.owner_hex = signer.public_key.hex()
        self.known: dict = {}  # node_id -> NodeInfo, everything seen in neighbor tables
        self.last_holders: dict = {}  # key -> [NodeInfo] from push acks
        self.dead: set = set()  # node ids that failed to answer this client

    # ---------------------------------------------------------------- lookup
    def neighbors(self, node: NodeInfo):
        if node.node_id in self.dead:
            return None
        reply = self.gateway.request_all([(node, self.gateway.client.app(Tag.FIND_PREFIX, {}))])[0]
        if reply is None:
            self.dead.add(node.node_id)
            return None
        nodes = [NodeInfo.from_dict(d) for d in parse_app(reply.payload)[1]["nodes"]]
        for n in nodes:
            self.known[n.node_id] = n
        return nodes

    def locate(self, key: str) -> NodeInfo:
        """Outermost live node on the key's group path, found by walking neighbor tables."""
        return outermost_node(key_bits(key), self.entry, self.neighbors)

    def candidates(self, key: str, hint: Optional[str] = None) -> list:
        """Nodes that should hold ``key``: located node first, then other known path nodes deepest first."""
        bits = key_bits(key)
        out = []
        try:
            out.append(self.locate(key))
        except UnreachableNode:
            log.info("lookup for %s failed; falling back to known path nodes", key[:12])
        on_path = sorted(
            (n for n in self.known.values() if is_prefix_of(n.group_id, bits)),
            key=lambda n: (-len(n.group_id), n.node_id),
        )
        if hint is not None:
            on_path.sort(key=lambda n: n.group_id != hint)
        for n in list(self.last_holders.get(key, ())) + on_path:
            if all(n.node_id != o.node_id for o in out):
                out.append(n)
        return out

    # ------------------------------------------------------------------ push
    def _push_msg(self, key: str, data: bytes):
        header = {"key": key, "owner": self.owner_hex, "auth": sign_push(self.signer, key, data), "role": "primary"}
        return self.gateway.client.app(Tag.PUSH_OBJECT, header, data)

    def push_many(self, items, attempts: int = 3) -> list:
        """Push ``(key, data)`` pairs concurrently; returns the holder list per item.

        A primary that does not answer is marked dead and the item is
        re-located, which lands it on the next live node of its group path.
        """
        items = list(items)
        out: list = [None] * len(items)
        pending = list(range(len(items)))
        for _ in range(attempts):
            pairs = [(self.locate(items[i][0]), self._push_msg(*items[i])) for i in pending]
            replies = self.gateway.request_all(pairs)
            retry = []
            for i, (dest, _), reply in zip(pending, pairs, replies):
                key = items[i][0]
                if reply is None:
                    self.dead.add(dest.node_id)
                    retry.append(i)
                    continue
                ack = parse_app(reply.payload)[1]
                if not ack.get("ok"):
                    raise UnreachableNode(f"{dest.node_id} refused {key[:16]}: {ack.get('reason')}")
                holders = [NodeInfo.from_dict(d) for d in ack["holders"]]
                self.last_holders[key] = holders
                out[i] = holders
            pending = retry
            if not pending:
                return out
        raise UnreachableNode(f"no live holder accepted {items[pending[0]][0][:16]}")

    def push_content(self, chunks: merkle.ChunkingResult) -> NodeInfo:
        """Leaves in parallel, then the manifest; returns the primary holder of the root key."""
        holders = self.push_many((leaf.id, leaf.data) for leaf in chunks.leaves)
        if chunks.manifest is not None:
            holders = self.push_many([(chunks.root + MANIFEST_SUFFIX, chunks.manifest.to_bytes())])
        return holders[0][0]

    def push_capsule(self, root: Optional[str], capsule: crypto.Capsule) -> str:
        data = capsule.to_bytes()
        oid = merkle.object_id(data)
        items = [(oid, data)]
        if root is not None:
            items.append((root + CAPSULE_SUFFIX, data))
        self.push_many(items)
        return oid

    # ----------------------------------------------------------------- fetch
    def fetch(self, key: str, hint: Optional[str] = None) -> bytes:
        """Bytes for ``key`` from the first holder returning a valid copy."""
        corrupt = False
        for node in self.candidates(key, hint):
            reply = self.gateway.request_all([(node, self.gateway.client.app(Tag.GET_OBJECT, {"key": key}))])[0]
            if reply is None:
                continue
            _, header, blob = parse_app(reply.payload)
            if not header.get("found"):
                continue
            if key_matches(key, blob):
                return blob
            corrupt = True
            log.warning("holder %s returned a corrupt copy of %s", node.node_id[:8], key[:12])
        if corrupt:
            raise IntegrityFailure(key)
        raise MissingObject(key)

    def fetch_content(self, ref: str, size: Optional[int] = None, hint: Optional[str] = None) -> bytes:
        """Reassemble content whose root is ``ref``; ``size`` (ciphertext bytes) picks the layout."""
        if size is None:
            try:
                return self.fetch(ref, hint)
            except MissingObject:
                size = OBJECT_SIZE + 1
        if size <= OBJECT_SIZE:
            return self.fetch(ref, hint)
        manifest = merkle.MerkleManifest.from_bytes(self.fetch(ref + MANIFEST_SUFFIX, hint))
        if manifest.root != ref:
            raise IntegrityFailure(ref)
        return merkle.reassemble(manifest, self.fetch)

    def fetch_capsule(self, ref: str) -> crypto.Capsule:
        return crypto.Capsule.from_bytes(self.fetch(ref))


@dataclass(frozen=True)
class Listing:
    name: str
    kind: str
    size: int
    object_ref: str


class UserSession:
    """One user's view: a key pair, the ledger and an entry node."""

    def __init__(self, keypair: crypto.KeyPair, ledger: Ledger, gateway, entry: NodeInfo, seed=None):
        self.keypair = keypair
        self.ledger = ledger
        self.storage = StorageClient(gateway, entry, keypair.private)
        self.seed = seed
        self._ops = 0
        self.root_cache: Optional[tuple] = None  # (FolderObject, RootPointer)

    @property
    def owner(self) -> str:
        return self.keypair.public.digest()

    def _next_seed(self, label: str):
        self._ops += 1
        if self.seed is None:
            return None
        return f"{self.seed}/{label}/{self._ops}"

    # --------------------------------------------------------------- folders
    def _load_folder(self, ref: str, capsule_ref: Optional[str] = None, hint: Optional[str] = None) -> FolderObject:
        capsule_key = capsule_ref or ref + CAPSULE_SUFFIX
        capsule = self.storage.fetch_capsule(capsule_key)
        ct = self.storage.fetch_content(ref, hint=hint)
        return open_folder(self.keypair.private, capsule, ct)

    def root(self) -> FolderObject:
        """Current root folder; a fresh session reads the pointer from the ledger."""
        try:
            pointer = self.ledger.latest_root(self.owner)
        except NotFound:
            self.root_cache = None
            return FolderObject()
        if self.root_cache is not None and self.root_cache[1] == pointer:
            return self.root_cache[0]
        folder = self._load_folder(pointer.root_ref, hint=pointer.group_id)
        self.root_cache = (folder, pointer)
        return folder

    def _folder_chain(self, parts: list, create: bool) -> list:
        """Folders from the root down to ``parts``: ``[(name, FolderObject)]``, root named ''."""
        chain = [("", self.root())]
        for name in parts:
            current = chain[-1][1]
            if name in current:
                entry = current[name]
                if entry.kind != FOLDER:
                    raise NotFound(f"{name} is not a folder")
                chain.append((name, self._load_folder(entry.object_ref, entry.capsule_ref)))
            elif create:
                chain.append((name, FolderObject()))
            else:
                raise NotFound(name)
        return chain

    def _seal(self, folder: FolderObject) -> tuple:
        """Encrypt, store and return ``(root ref, capsule ref, primary holder)``."""
        ct, capsule, chunks = seal_folder(self.keypair.public, folder, seed=self._next_seed("folder"))
        primary = self.storage.push_content(chunks)
        capsule_ref = self.storage.push_capsule(chunks.root, capsule)
        return chunks.root, capsule_ref, primary

    def _commit(self, chain: list, accepts=()) -> Receipt:
        """Re-seal every folder in ``chain`` bottom-up and commit the new root."""
        folder = chain[-1][1]
        for i in range(len(chain) - 1, 0, -1):
            name = chain[i][0]
            ref, capsule_ref, _ = self._seal(folder)
            entry = FolderEntry(name, FOLDER, ref, folder.total_size, capsule_ref)
            folder = replace_entry(chain[i - 1][1], entry)
        ref, _, primary = self._seal(folder)
        body = StorageContract(self.owner, ref, primary.group_id, tuple(accepts))
        receipt = self.ledger.submit(Transaction.create(self.keypair.private, body))
        self.ledger.wait_for(receipt)
        self.root_cache = (folder, RootPointer(self.owner, ref, primary.group_id))
        return receipt

    # ------------------------------------------------------------------ flows
    def put_file(self, path: str, content: bytes) -> Receipt:
        *parents, name = split_path(path) or [""]
        chain = self._folder_chain(parents, create=True)
        if name in chain[-1][1]:
            raise DuplicateName(name)
        ct, capsule = crypto.encrypt(self.keypair.public, content, seed=self._next_seed("file"))
        chunks = merkle.chunk(ct)
        self.storage.push_content(chunks)
        capsule_ref = self.storage.push_capsule(chunks.root, capsule)
        entry = FolderEntry(name, FILE, chunks.root, len(content), capsule_ref)
        chain[-1] = (chain[-1][0], add_entry(chain[-1][1], entry))
        return self._commit(chain)

    def _entry(self, path: str) -> FolderEntry:
        parts = split_path(path)
        if not parts:
            raise NotFound(path)
        chain = self._folder_chain(parts[:-1], create=False)
        try:
            return chain[-1][1][parts[-1]]
        except NameNotFound:
            raise NotFound(path) from None

    def read_entry(self, entry: FolderEntry) -> bytes:
        capsule = self.storage.fetch_capsule(entry.capsule_ref)
        ct = self.storage.fetch_content(entry.object_ref, entry.size + crypto.AEAD_OVERHEAD)
        return crypto.decrypt(self.keypair.private, capsule, ct)

    def get_file(self, path: str) -> bytes:
        entry = self._entry(path)
        if entry.kind != FILE:
            raise NotFound(f"{path} is a folder")
        return self.read_entry(entry)

    def ls(self, path: str = "") -> list:
        parts = split_path(path)
        folder = self._folder_chain(parts, create=False)[-1][1]
        return [Listing(e.name, e.kind, e.size, e.object_ref) for e in folder.entries.values()]

    def share_file(self, receiver: crypto.PublicKey, path: str) -> Receipt:
        entry = self._entry(path)
        if entry.kind != FILE:
            raise NotFound(f"{path} is a folder")
        capsule = self.storage.fetch_capsule(entry.capsule_ref)
        rk = crypto.rekey(self.keypair.private, receiver, seed=self._next_seed("rekey"))
        shared_ref = self.storage.push_capsule(None, crypto.reencrypt(rk, capsule))
        body = FileSend(self.owner, receiver.digest(), entry.object_ref, shared_ref, entry.name, entry.size)
        receipt = self.ledger.submit(Transaction.create(self.keypair.private, body))
        self.ledger.wait_for(receipt)
        return receipt

    def pending_shares(self) -> list:
        return self.ledger.pending_shares(self.owner)

    def accept_share(self, grant: Transaction, name: Optional[str] = None) -> Receipt:
        body = grant.body
        if not isinstance(body, FileSend) or body.receiver != self.owner:
            raise NotAddressee(grant.tx_id)
        entry = FolderEntry(name or body.name, FILE, body.object_ref, body.size, body.reenc_capsule_ref)
        chain = self._folder_chain([], create=False)
        chain[-1] = ("", add_entry(chain[-1][1], entry))
        return self._commit(chain, accepts=(grant.tx_id,))


def run_audit(gateway, members, settle=lambda: None) -> AuditReport:
    """One audit round over ``members``: every node challenges, then times out stragglers and repairs."""
    members = list(members)
    client = gateway.client
    gateway.request_all([(m, client.app(Tag.AUDIT, {"phase": "start"})) for m in members])
    settle()
    replies = gateway.request_all([(m, client.app(Tag.AUDIT, {"phase": "finish"})) for m in members])
    settle()
    report = AuditReport()
    for reply in replies:
        if reply is not None:
            report.merge(AuditReport.from_dict(parse_app(reply.payload)[1]["report"]))
    return report


def network_stats(gateway, entry: NodeInfo) -> dict:
    """Node count, height, open branches and per-depth object counts, as seen from ``entry``."""
    reply = gateway.request(entry, gateway.client.app(Tag.STATS, {}))
    head = parse_app(reply.payload)[1]
    members = [NodeInfo.from_dict(d) for d in head["members"]]
    per_depth: dict = {}
    replies = gateway.request_all([(m, gateway.client.app(Tag.STATS, {})) for m in members])
    for m, r in zip(members, replies):
        if r is not None:
            count = parse_app(r.payload)[1]["objects"]
            per_depth[m.depth] = per_depth.get(m.depth, 0) + count
    return {
        "nodes": len(members),
        "height": max((m.depth for m in members), default=0),
        "open_branches": head["open"],
        "objects_per_depth": {str(d): per_depth[d] for d in sorted(per_depth)},
    }
