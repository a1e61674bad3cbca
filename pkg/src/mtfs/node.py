"""Storage node: the overlay state machine plus object push/get, replication and audits."""

from __future__ import annotations

import hashlib
import logging
from typing import Optional

from . import crypto, merkle
from .errors import MalformedManifest, ObjectLost
from .merkle import CAPSULE_SUFFIX, MANIFEST_SUFFIX, ObjectStore
from .overlay import Message, NodeInfo, RedundancyConfig, Tag, TreeNode, Variant, app_payload, parse_app
from .replication import (
    BAD_PROOF,
    CORRUPT,
    TIMEOUT,
    AuditReport,
    NonceBook,
    ReplicationPolicy,
    audit_pairs,
    proof_digest,
    repair_target,
    replicate,
)
from .routing import group_path, key_bits

log = logging.getLogger(__name__)

PRIMARY, REPLICA, REPAIR = "primary", "replica", "repair"


def push_auth_bytes(key: str, data: bytes) -> bytes:
    return b"mtfs/push|" + key.encode() + b"|" + merkle.digest(data)


def sign_push(sk: crypto.PrivateKey, key: str, data: bytes) -> str:
    return crypto.sign(sk, push_auth_bytes(key, data)).hex()


def key_matches(key: str, data: bytes) -> bool:
    """Whether ``data`` is a valid payload for store key ``key``."""
    if len(key) == 64:
        return merkle.verify_object(key, data)
    if key.endswith(MANIFEST_SUFFIX):
        try:
            m = merkle.MerkleManifest.from_bytes(data)
            m.check()
        except (MalformedManifest, merkle.RootMismatch):
            return False
        return m.root == key[: -len(MANIFEST_SUFFIX)]
    # capsules are bound to their root only by the owner's signature
    return key.endswith(CAPSULE_SUFFIX)


class StorageNode(TreeNode):
    def __init__(
        self,
        info: NodeInfo,
        store: Optional[ObjectStore] = None,
        policy: Optional[ReplicationPolicy] = None,
        redundancy: Optional[RedundancyConfig] = None,
        k: int = 2,
        rng=None,
        cheat: bool = False,
    ):
        super().__init__(info, redundancy=redundancy, k=k)
        self.store = store if store is not None else ObjectStore()
        self.policy = policy or ReplicationPolicy()
        self.cheat = cheat
        self._digests: dict = {}  # what a cheating node keeps instead of bytes
        self.holders: dict = {}  # key -> [NodeInfo]
        self.auth: dict = {}  # key -> (owner pk hex, signature hex)
        self.nonces = NonceBook(self.policy.challenge_size, rng)
        self._expected: dict = {}  # (key, holder id) -> (expected proof, NodeInfo)
        self.report = AuditReport()

    # ---------------------------------------------------------------- store
    def has_key(self, key: str) -> bool:
        if self.cheat:
            return key in self._digests
        return self.store.resolve(key) is not None

    def read_key(self, key: str) -> bytes:
        return self.store.get_key(key)

    def _write_key(self, key: str, data: bytes) -> None:
        if self.cheat:
            self._digests[key] = merkle.digest(data)
        elif len(key) == 64:
            self.store.put(data)
        else:
            self.store.put_named(key, data)

    def stored_keys(self) -> list:
        if self.cheat:
            return sorted(self._digests)
        return sorted(set(self.store.ids()) | set(self.store.names()))

    # ------------------------------------------------------------- requests
    def handle_request(self, sender, msg, tag, header, blob):
        if tag == Tag.PUSH_OBJECT:
            return self._on_push(sender, msg, header, blob)
        if tag == Tag.GET_OBJECT:
            return self._on_get(sender, msg, header)
        if tag == Tag.CHALLENGE:
            return self._on_challenge(sender, msg, header)
        if tag == Tag.PROOF:
            self._on_proof(sender, header)
            return []
        if tag == Tag.HOLDERS:
            holders = [NodeInfo.from_dict(d) for d in header["holders"]]
            if any(h.node_id == self.node_id for h in holders):
                self.holders[header["key"]] = holders
            else:
                # evicted by a repair: stop answering for this replica
                self.holders.pop(header["key"], None)
            return []
        if tag == Tag.PUSH_ACK:
            return []
        if tag == Tag.STATS:
            return [(sender, self.reply(msg, Tag.STATS_REPLY, self.stats()))]
        if tag == Tag.AUDIT:
            if header.get("phase") == "start":
                out = self.start_audit()
                return [(sender, self.reply(msg, Tag.AUDIT_REPLY, {"started": len(out)}))] + out
            report, out = self.finish_audit()
            return [(sender, self.reply(msg, Tag.AUDIT_REPLY, {"report": report.to_dict()}))] + out
        return super().handle_request(sender, msg, tag, header, blob)

    def stats(self) -> dict:
        return {
            "node": self.info.to_dict(),
            "objects": len(self.holders),
            "members": [m.to_dict() for m in self.member_list()],
            "open": sorted([gid, side] for gid, side in self.open),
        }

    def _on_push(self, sender, msg, header, blob):
        key, owner, sig = header["key"], header["owner"], header["auth"]
        try:
            pk = crypto.PublicKey.from_hex(owner)
            authorized = crypto.verify(pk, push_auth_bytes(key, blob), bytes.fromhex(sig))
        except (ValueError, crypto.MalformedKey):
            authorized = False
        if not authorized:
            return [(sender, self.reply(msg, Tag.PUSH_ACK, {"ok": False, "reason": "unauthorized"}))]
        if not key_matches(key, blob):
            return [(sender, self.reply(msg, Tag.PUSH_ACK, {"ok": False, "reason": "content mismatch"}))]
        self._write_key(key, blob)
        self.auth[key] = (owner, sig)
        out = []
        role = header.get("role", PRIMARY)
        if role == PRIMARY:
            view = self.position_view()
            if self.group_id not in {n.group_id for n in group_path(key_bits(key), view)}:
                view = {**view, self.group_id: self.info}
            result = replicate(key, self.info, self.policy, view)
            holders = [self.info] + [h for h in result.holders if h.node_id != self.node_id]
            holders = holders[: self.policy.r]
            self.holders[key] = holders
            hdicts = [h.to_dict() for h in holders]
            for h in holders[1:]:
                out.append((h.node_id, self.app(Tag.PUSH_OBJECT, {**header, "role": REPLICA, "holders": hdicts}, blob)))
            ack = {"ok": True, "holders": hdicts, "degraded": len(holders) < self.policy.r}
        else:
            self.holders[key] = [NodeInfo.from_dict(d) for d in header["holders"]]
            ack = {"ok": True}
        return [(sender, self.reply(msg, Tag.PUSH_ACK, ack))] + out

    def _on_get(self, sender, msg, header):
        key = header["key"]
        if self.cheat or not self.has_key(key):
            return [(sender, self.reply(msg, Tag.OBJECT, {"found": False, "key": key}))]
        return [(sender, self.reply(msg, Tag.OBJECT, {"found": True, "key": key}, self.read_key(key)))]

    def _on_challenge(self, sender, msg, header):
        key, nonce = header["key"], bytes.fromhex(header["nonce"])
        if self.cheat and key in self._digests:
            proof = proof_digest(nonce, self._digests[key])
        elif self.has_key(key):
            proof = proof_digest(nonce, self.read_key(key))
        else:
            proof = b""
        return [(sender, self.reply(msg, Tag.PROOF, {"key": key, "nonce": header["nonce"], "proof": proof.hex()}))]

    # ---------------------------------------------------------------- audits
    def _own_copy_ok(self, key: str) -> Optional[bytes]:
        if self.cheat or not self.has_key(key):
            return None
        data = self.read_key(key)
        return data if key_matches(key, data) else None

    def start_audit(self) -> list:
        """Issue one challenge per (object, holder) pair this node is responsible for."""
        self.report = AuditReport()
        out = []
        for key in sorted(self.holders):
            holders = self.holders[key]
            pairs = [(a, t) for a, t in audit_pairs(holders) if a.node_id == self.node_id]
            if not pairs and len(holders) > 1:
                continue
            data = self._own_copy_ok(key)
            if data is None:
                if not self.cheat:
                    self.report.failures.append((key, self.node_id, CORRUPT))
                continue
            for _, target in pairs:
                nonce = self.nonces.issue(key, target.node_id)
                self._expected[(key, target.node_id)] = (proof_digest(nonce, data), target)
                self.report.challenged.append((key, target.node_id))
                out.append((target.node_id, self.app(Tag.CHALLENGE, {"key": key, "nonce": nonce.hex()})))
        return out

    def _on_proof(self, sender, header):
        key = header["key"]
        nonce = bytes.fromhex(header["nonce"])
        if not self.nonces.redeem(key, sender, nonce):
            log.info("rejecting stale or replayed proof for %s from %s", key[:12], sender[:8])
            return
        expected, _ = self._expected.pop((key, sender))
        if bytes.fromhex(header["proof"]) != expected:
            self.report.failures.append((key, sender, BAD_PROOF))

    def finish_audit(self) -> tuple:
        """Time out unanswered challenges and push repairs for every failure."""
        for key, holder in self.nonces.outstanding():
            self.nonces.expire(key, holder)
            self._expected.pop((key, holder), None)
            self.report.failures.append((key, holder, TIMEOUT))
        out = []
        view = self.position_view()
        by_key: dict = {}
        for key, holder, _ in self.report.failures:
            if holder != self.node_id:
                by_key.setdefault(key, []).append(holder)
        for key, failed_ids in sorted(by_key.items()):
            data = self._own_copy_ok(key)
            if data is None:
                continue
            holders = self.holders.get(key, [])
            failed = [h for h in holders if h.node_id in failed_ids]
            path = group_path(key_bits(key), view)
            remaining = [h for h in holders if h.node_id not in failed_ids]
            for bad in failed:
                try:
                    new = repair_target(path, remaining, failed)
                except ObjectLost:
                    break
                if new is None:
                    # path exhausted: rewrite the failed copy in place
                    new = bad
                remaining.append(new)
                self.report.repairs.append((key, bad.node_id, new.node_id))
            remaining = sorted(remaining, key=lambda n: -len(n.group_id))
            self.holders[key] = remaining
            hdicts = [h.to_dict() for h in remaining]
            owner, sig = self.auth[key]
            for key_, bad_id, new_id in self.report.repairs:
                if key_ != key:
                    continue
                header = {"key": key, "owner": owner, "auth": sig, "role": "repair", "holders": hdicts}
                out.append((new_id, self.app(Tag.PUSH_OBJECT, header, data)))
            notify = {h.node_id for h in remaining} | {h.node_id for h in failed}
            for nid in sorted(notify - {self.node_id}):
                out.append((nid, self.app(Tag.HOLDERS, {"key": key, "holders": hdicts})))
        return self.report, out


class ClientEndpoint:
    """A non-member endpoint (user client or driver) that issues requests and collects replies."""

    def __init__(self, info: NodeInfo):
        self.info = info
        self._seq = 0
        self.replies: dict = {}  # request msg_id hex -> reply Message
        self.seen: set = set()

    @property
    def node_id(self) -> str:
        return self.info.node_id

    joined = False

    def contact(self, node_id):
        return None

    def app(self, tag, header=None, blob=b""):
        self._seq += 1
        msg_id = hashlib.sha256(bytes.fromhex(self.node_id) + self._seq.to_bytes(8, "big")).digest()
        return Message(Variant.APP, msg_id, bytes.fromhex(self.node_id), payload=app_payload(tag, header, blob))

    def handle_message(self, sender, msg):
        if msg.variant != Variant.APP or msg.is_broadcast:
            return []
        try:
            _, header, _ = parse_app(msg.payload)
        except ValueError:
            return []
        if "re" in header:
            self.replies[header["re"]] = msg
        return []

    def take_reply(self, request: Message):
        return self.replies.pop(request.msg_id.hex(), None)
