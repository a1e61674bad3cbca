"""Replica placement along the group path and nonce-based storage audits."""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import InsufficientPath, ObjectLost
from .overlay import NodeInfo
from .routing import group_path, key_bits

TIMEOUT = "timeout"
BAD_PROOF = "bad-proof"
CORRUPT = "corrupt-local"


@dataclass(frozen=True)
class ReplicationPolicy:
    r: int = 3
    audit_period: float = 60.0  # simulated seconds
    challenge_size: int = 32

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("replication factor must be >= 1")
        if self.challenge_size < 16:
            raise ValueError("challenge nonces must be at least 16 bytes")


@dataclass(frozen=True)
class StorageProof:
    object_ref: str
    nonce: bytes
    proof: bytes


def proof_digest(nonce: bytes, data: bytes) -> bytes:
    return hashlib.sha256(nonce + data).digest()


def prove(object_ref: str, nonce: bytes, data: bytes) -> StorageProof:
    return StorageProof(object_ref, nonce, proof_digest(nonce, data))


def check_proof(proof: StorageProof, data: bytes) -> bool:
    return secrets.compare_digest(proof.proof, proof_digest(proof.nonce, data))


@dataclass(frozen=True)
class ReplicationResult:
    holders: tuple  # NodeInfo, deepest first
    wanted: int

    @property
    def degraded(self) -> bool:
        return len(self.holders) < self.wanted

    @property
    def holder_ids(self) -> set:
        return {n.node_id for n in self.holders}


def _depth_key(n: NodeInfo):
    return (len(n.group_id), n.group_id, n.node_id)


def replica_set(path: list, r: int) -> tuple:
    """The ``r`` deepest nodes of a root-first group path, deepest first."""
    return tuple(reversed(path[-r:])) if r <= len(path) else tuple(reversed(path))


def replicate(
    object_ref: str,
    primary: NodeInfo,
    policy: ReplicationPolicy,
    members,
    strict: bool = False,
) -> ReplicationResult:
    """Choose holders for ``object_ref``: the primary plus the next path nodes rootward."""
    path = group_path(key_bits(object_ref), members)
    if primary.group_id not in {n.group_id for n in path}:
        raise ValueError(f"primary {primary.group_id!r} is not on the object's group path")
    upto = [n for n in path if len(n.group_id) <= len(primary.group_id)]
    upto[-1] = primary
    result = ReplicationResult(replica_set(upto, policy.r), policy.r)
    if strict and result.degraded:
        raise InsufficientPath(f"{len(result.holders)} of {policy.r} replicas")
    return result


def audit_pairs(holders: Iterable[NodeInfo]) -> list:
    """(auditor, target) pairs: the shallowest holder audits every other, the deepest audits it back."""
    hs = sorted(holders, key=_depth_key)
    if len(hs) < 2:
        return []
    top = hs[0]
    pairs = [(top, h) for h in hs[1:]]
    pairs.append((hs[-1], top))
    return pairs


def repair_target(path: list, holders: Iterable[NodeInfo], failed: Iterable[NodeInfo]) -> Optional[NodeInfo]:
    """Deepest path node neither holding nor failed; ObjectLost if no honest holder is left."""
    failed_ids = {n.node_id for n in failed}
    honest = [h for h in holders if h.node_id not in failed_ids]
    if not honest:
        raise ObjectLost("no honest holder remains")
    busy = {h.node_id for h in honest} | failed_ids
    for node in reversed(path):
        if node.node_id not in busy:
            return node
    return None


class NonceBook:
    """Issues fresh challenge nonces and rejects replays."""

    def __init__(self, size: int = 32, rng=None):
        self.size = size
        self._rng = rng
        self._issued: dict = {}  # (object, holder) -> nonce awaiting an answer
        self._used: set = set()

    def issue(self, object_ref: str, holder: str) -> bytes:
        while True:
            nonce = self._rng.randbytes(self.size) if self._rng is not None else secrets.token_bytes(self.size)
            if (object_ref, holder, nonce) not in self._used:
                break
        self._issued[(object_ref, holder)] = nonce
        return nonce

    def redeem(self, object_ref: str, holder: str, nonce: bytes) -> bool:
        """True once for the outstanding nonce; replays and unknown nonces fail."""
        if self._issued.get((object_ref, holder)) != nonce:
            return False
        del self._issued[(object_ref, holder)]
        self._used.add((object_ref, holder, nonce))
        return True

    def outstanding(self) -> list:
        return sorted(self._issued)

    def expire(self, object_ref: str, holder: str) -> None:
        nonce = self._issued.pop((object_ref, holder), None)
        if nonce is not None:
            self._used.add((object_ref, holder, nonce))


@dataclass
class AuditReport:
    challenged: list = field(default_factory=list)  # (key, holder node_id)
    failures: list = field(default_factory=list)  # (key, holder node_id, reason)
    repairs: list = field(default_factory=list)  # (key, failed node_id, new node_id)

    def merge(self, other: "AuditReport") -> None:
        self.challenged += other.challenged
        for f in other.failures:
            if not any(f[:2] == g[:2] for g in self.failures):
                self.failures.append(f)
        self.repairs += other.repairs

    def to_dict(self) -> dict:
        return {
            "challenged": [list(c) for c in self.challenged],
            "failures": [list(f) for f in self.failures],
            "repairs": [list(r) for r in self.repairs],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        return cls(
            [tuple(c) for c in d["challenged"]],
            [tuple(f) for f in d["failures"]],
            [tuple(r) for r in d["repairs"]],
        )

    @property
    def flagged(self) -> set:
        return {(k, h) for k, h, _ in self.failures}
