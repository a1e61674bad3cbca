"""Self-organizing binary-tree overlay.

Nodes are single-threaded state machines: :meth:`TreeNode.handle_message`
consumes one message and returns the messages to send as ``(dest node_id,
Message)`` pairs.  The simulator and the TCP runtime both drive the same
class; neither the node nor its callers share state across nodes.

Group ids are plain ``str`` bit strings (``""`` is the root, children append
``"0"`` for left and ``"1"`` for right).
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Optional

from .errors import (
    AlreadyBootstrapped,
    InvalidGroupId,
    JoinFailed,
    KTooSmall,
    NoOpenBranch,
)

log = logging.getLogger(__name__)

LEFT, RIGHT = 0, 1
CLUSTER_SLOT = 2  # join request for an existing position (cluster mode)
MAX_JOIN_ATTEMPTS = 8
DEFAULT_SEEN_CAPACITY = 4096


def check_group_id(gid: str) -> str:
    if not isinstance(gid, str) or gid.strip("01"):
        raise InvalidGroupId(repr(gid))
    return gid


def common_prefix_len(a: str, b: str) -> int:
    n = min(len(a), len(b))
    for i in range(n):
        if a[i] != b[i]:
            return i
    return n


def tree_distance(a: str, b: str) -> int:
    return len(a) + len(b) - 2 * common_prefix_len(a, b)


def gids_within(gid: str, radius: int) -> set:
    """All bit strings at tree distance <= radius from ``gid`` (existing or not)."""
    out = set()
    for up in range(min(radius, len(gid)) + 1):
        anc = gid[: len(gid) - up]
        frontier = [anc]
        out.add(anc)
        for _ in range(radius - up):
            frontier = [f + b for f in frontier for b in "01"]
            out.update(frontier)
    return out


@dataclass(frozen=True)
class NodeInfo:
    node_id: str
    host: str = "sim"
    port: int = 0
    group_id: str = ""

    def with_group(self, gid: str) -> "NodeInfo":
        return NodeInfo(self.node_id, self.host, self.port, check_group_id(gid))

    def to_dict(self) -> dict:
        return {"id": self.node_id, "host": self.host, "port": self.port, "gid": self.group_id}

    @classmethod
    def from_dict(cls, d: dict) -> "NodeInfo":
        return cls(d["id"], d["host"], int(d["port"]), check_group_id(d["gid"]))

    @property
    def depth(self) -> int:
        return len(self.group_id)


@dataclass(frozen=True)
class OpenBranch:
    parent_group_id: str
    side: int
    parent_contact: Optional[NodeInfo] = field(default=None, compare=False, hash=False)

    @property
    def key(self) -> tuple:
        return (self.parent_group_id, self.side)

    @property
    def child_group_id(self) -> str:
        return self.parent_group_id + str(self.side)

    def sort_key(self) -> tuple:
        return (len(self.parent_group_id), self.parent_group_id, self.side)

    def to_dict(self) -> dict:
        d = {"parent": self.parent_group_id, "side": self.side}
        if self.parent_contact is not None:
            d["contact"] = self.parent_contact.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OpenBranch":
        contact = NodeInfo.from_dict(d["contact"]) if "contact" in d else None
        return cls(check_group_id(d["parent"]), int(d["side"]), contact)


def select_branch(open_set: Iterable[OpenBranch], exclude: Iterable[tuple] = ()) -> OpenBranch:
    """Shallowest open branch; ties go to the smallest parent bits, left before right."""
    excluded = set(exclude)
    candidates = [b for b in open_set if b.key not in excluded]
    if not candidates:
        raise NoOpenBranch()
    return min(candidates, key=OpenBranch.sort_key)


class Variant(IntEnum):
    AVAILABLE_BRANCHES = 0
    DISCARDED_BRANCHES = 1
    GROUP_ID = 2
    APP = 3


class Tag(IntEnum):
    """First payload byte of APP messages."""

    DATA = 0x00  # broadcast application data
    FIND_PREFIX = 0x01
    PUSH_OBJECT = 0x02
    CHALLENGE = 0x03
    JOIN = 0x04
    SNAPSHOT = 0x05
    GET_OBJECT = 0x06
    ANNOUNCE = 0x07  # broadcast: a new cluster member
    HOLDERS = 0x08
    STATS = 0x09
    AUDIT = 0x0A
    HELLO = 0x0F  # transport only: identifies the dialing endpoint
    FIND_PREFIX_REPLY = 0x81
    PUSH_ACK = 0x82
    PROOF = 0x83
    JOIN_REJECT = 0x84
    SNAPSHOT_REPLY = 0x85
    OBJECT = 0x86
    STATS_REPLY = 0x89
    AUDIT_REPLY = 0x8A


BROADCAST_TAGS = {Tag.DATA, Tag.ANNOUNCE}


def app_payload(tag: int, header: Optional[dict] = None, blob: bytes = b"") -> bytes:
    head = json.dumps(header or {}, sort_keys=True, separators=(",", ":")).encode()
    return bytes([tag]) + struct.pack(">I", len(head)) + head + blob


def parse_app(payload: bytes) -> tuple:
    """Return ``(tag, header, blob)``.  DATA payloads carry raw bytes only."""
    if not payload:
        raise ValueError("empty APP payload")
    tag = payload[0]
    if tag == Tag.DATA:
        return tag, {}, payload[1:]
    if len(payload) < 5:
        raise ValueError("short APP payload")
    (n,) = struct.unpack(">I", payload[1:5])
    if len(payload) < 5 + n:
        raise ValueError("short APP header")
    return tag, json.loads(payload[5 : 5 + n]), payload[5 + n :]


@dataclass(frozen=True)
class Message:
    variant: int
    msg_id: bytes
    origin: bytes
    branches: tuple = ()
    group_id: Optional[str] = None
    payload: bytes = b""

    @property
    def tag(self) -> Optional[int]:
        if self.variant == Variant.APP and self.payload:
            return self.payload[0]
        return None

    @property
    def is_broadcast(self) -> bool:
        if self.variant in (Variant.AVAILABLE_BRANCHES, Variant.DISCARDED_BRANCHES):
            return True
        return self.variant == Variant.APP and self.tag in BROADCAST_TAGS


@dataclass(frozen=True)
class RedundancyConfig:
    mode: str = "none"  # none | cluster | extra_links
    cluster_size: int = 3
    link_radius: int = 2

    def __post_init__(self):
        if self.mode not in ("none", "cluster", "extra_links"):
            raise ValueError(f"unknown redundancy mode {self.mode!r}")
        if not 1 <= self.cluster_size <= 3:
            raise ValueError("cluster_size must be in [1, 3]")
        if self.link_radius < 2:
            raise ValueError("link_radius must be >= 2")

    @property
    def members_per_position(self) -> int:
        return self.cluster_size if self.mode == "cluster" else 1

    def link_gids(self, gid: str) -> set:
        """Group ids (including ``gid`` itself) a node at ``gid`` links to."""
        if self.mode == "extra_links":
            return gids_within(gid, self.link_radius)
        out = {gid, gid + "0", gid + "1"}
        if gid:
            out.add(gid[:-1])
        return out


@dataclass(frozen=True)
class NeighborTable:
    k: int
    entries: dict  # hop distance -> frozenset of NodeInfo

    def nodes(self) -> list:
        return sorted(
            (n for hop in sorted(self.entries) for n in self.entries[hop]),
            key=lambda n: (len(n.group_id), n.group_id, n.node_id),
        )

    def group_ids(self) -> set:
        return {n.group_id for n in self.nodes()}


def true_open_slots(group_ids: Iterable[str]) -> set:
    gids = set(group_ids)
    return {(g, s) for g in gids for s in (LEFT, RIGHT) if g + str(s) not in gids}


class TreeNode:
    """One overlay member (or joiner) as a message-driven state machine."""

    def __init__(
        self,
        info: NodeInfo,
        redundancy: Optional[RedundancyConfig] = None,
        k: int = 2,
        seen_capacity: int = DEFAULT_SEEN_CAPACITY,
    ):
        if k < 2:
            raise KTooSmall(k)
        self.info = info
        self.redundancy = redundancy or RedundancyConfig()
        self.k = k
        self.joined = False
        self.members: dict = {}  # gid -> {node_id: NodeInfo}
        self._by_id: dict = {}
        self.open: dict = {}  # (parent gid, side) -> OpenBranch
        self.seen: OrderedDict = OrderedDict()
        self.seen_capacity = seen_capacity
        self.app_inbox: list = []
        self.duplicates = 0
        self._seq = 0
        self._links_cache = None
        # join state
        self._contact: Optional[NodeInfo] = None
        self._excluded: set = set()
        self._attempts = 0
        self._pending: Optional[OpenBranch] = None
        self.join_error: Optional[Exception] = None

    # ------------------------------------------------------------------ ids
    @property
    def node_id(self) -> str:
        return self.info.node_id

    @property
    def group_id(self) -> str:
        return self.info.group_id

    def __repr__(self):
        return f"<{type(self).__name__} {self.node_id[:8]} gid={self.group_id!r}>"

    def next_msg_id(self) -> bytes:
        self._seq += 1
        return hashlib.sha256(bytes.fromhex(self.node_id) + self._seq.to_bytes(8, "big")).digest()

    def message(self, variant: int, **kw) -> Message:
        return Message(variant, self.next_msg_id(), bytes.fromhex(self.node_id), **kw)

    def app(self, tag: int, header: Optional[dict] = None, blob: bytes = b"") -> Message:
        return self.message(Variant.APP, payload=app_payload(tag, header, blob))

    def reply(self, request: Message, tag: int, header: Optional[dict] = None, blob: bytes = b"") -> Message:
        header = dict(header or {})
        header["re"] = request.msg_id.hex()
        return self.app(tag, header, blob)

    # ------------------------------------------------------------ membership
    def add_member(self, info: NodeInfo) -> None:
        slot = self.members.setdefault(info.group_id, {})
        if slot.get(info.node_id) != info:
            slot[info.node_id] = info
            self._by_id[info.node_id] = info
            self._links_cache = None
            if info.node_id == self.node_id:
                self.info = info

    def member_list(self) -> list:
        return sorted(
            (n for slot in self.members.values() for n in slot.values()),
            key=lambda n: (len(n.group_id), n.group_id, n.node_id),
        )

    def position_view(self) -> dict:
        """gid -> first NodeInfo (deterministic pick for cluster positions)."""
        return {g: slot[min(slot)] for g, slot in self.members.items() if slot}

    def contact(self, node_id: str) -> Optional[NodeInfo]:
        return self._by_id.get(node_id)

    def links(self) -> list:
        if self._links_cache is None:
            out = []
            if self.joined:
                for g in sorted(self.redundancy.link_gids(self.group_id), key=lambda g: (len(g), g)):
                    for nid in sorted(self.members.get(g, ())):
                        if nid != self.node_id:
                            out.append(nid)
            self._links_cache = out
        return self._links_cache

    def neighbors_within(self, k: Optional[int] = None) -> NeighborTable:
        """Nodes within ``k`` hops over the link graph implied by known members."""
        k = self.k if k is None else k
        if k < 2:
            raise KTooSmall(k)
        dist = {self.node_id: 0}
        frontier = [self.info]
        for hop in range(1, k + 1):
            nxt = []
            for node in frontier:
                for g in self.redundancy.link_gids(node.group_id):
                    for nid, info in self.members.get(g, {}).items():
                        if nid not in dist:
                            dist[nid] = hop
                            nxt.append(info)
            frontier = nxt
        entries: dict = {}
        for nid, hop in dist.items():
            info = self.info if nid == self.node_id else self._by_id[nid]
            entries.setdefault(hop, set()).add(info)
        return NeighborTable(k, {h: frozenset(v) for h, v in entries.items()})

    # ---------------------------------------------------------------- joining
    def bootstrap(self) -> list:
        if self.joined or self.members:
            raise AlreadyBootstrapped()
        self.info = self.info.with_group("")
        self.joined = True
        self.add_member(self.info)
        for side in (LEFT, RIGHT):
            b = OpenBranch("", side, self.info)
            self.open[b.key] = b
        return []

    def start_join(self, contact: NodeInfo) -> list:
        """Ask ``contact`` for the open-branch snapshot, then join."""
        if self.joined:
            raise AlreadyBootstrapped()
        self._contact = contact
        self._attempts = 0
        self._excluded = set()
        self.join_error = None
        return [(contact.node_id, self.app(Tag.SNAPSHOT))]

    def _slot_candidates(self) -> list:
        per = self.redundancy.members_per_position
        cands = []
        if per > 1:
            for g, slot in self.members.items():
                if len(slot) < per and (g, CLUSTER_SLOT) not in self._excluded:
                    cands.append(OpenBranch(g, CLUSTER_SLOT, slot[min(slot)]))
        if cands:
            return [min(cands, key=lambda b: (len(b.parent_group_id), b.parent_group_id))]
        return list(self.open.values())

    def _attempt_join(self) -> list:
        try:
            branch = select_branch(self._slot_candidates(), self._excluded)
        except NoOpenBranch as exc:
            self.join_error = exc
            return []
        self._pending = branch
        self._attempts += 1
        header = {"parent": branch.parent_group_id, "side": branch.side, "node": self.info.to_dict()}
        return [(branch.parent_contact.node_id, self.app(Tag.JOIN, header))]

    def _on_join_request(self, sender: str, msg: Message, header: dict) -> list:
        joiner = NodeInfo.from_dict(header["node"])
        side, parent = int(header["side"]), header["parent"]
        if not self.joined or parent != self.group_id:
            return [(sender, self.reply(msg, Tag.JOIN_REJECT, {"reason": "not-parent"}))]
        if side == CLUSTER_SLOT:
            slot = self.members.get(self.group_id, {})
            if len(slot) >= self.redundancy.members_per_position:
                return [(sender, self.reply(msg, Tag.JOIN_REJECT, {"reason": "cluster-full"}))]
            assigned = joiner.with_group(self.group_id)
            self.add_member(assigned)
            return [(sender, self.message(Variant.GROUP_ID, group_id=assigned.group_id))]
        child = self.group_id + str(side)
        if side not in (LEFT, RIGHT) or self.members.get(child):
            # duplicate connection for a taken branch: disconnect it
            return [(sender, self.reply(msg, Tag.JOIN_REJECT, {"reason": "branch-taken"}))]
        assigned = joiner.with_group(child)
        self.add_member(assigned)
        taken = self.open.pop((self.group_id, side), None) or OpenBranch(self.group_id, side, self.info)
        out = [(sender, self.message(Variant.GROUP_ID, group_id=child))]
        out += self.broadcast(self.message(Variant.DISCARDED_BRANCHES, branches=(taken,)))
        return out

    def _on_group_id(self, sender: str, msg: Message) -> list:
        if self.joined or self._pending is None:
            return []  # link-local and only meaningful to the joiner
        branch, self._pending = self._pending, None
        self.info = self.info.with_group(msg.group_id)
        self.joined = True
        self.add_member(self.info)
        self._links_cache = None
        if branch.side == CLUSTER_SLOT:
            return self.broadcast(self.app(Tag.ANNOUNCE, {"node": self.info.to_dict()}))
        mine = tuple(OpenBranch(self.group_id, s, self.info) for s in (LEFT, RIGHT))
        for b in mine:
            if not self.members.get(b.child_group_id):
                self.open[b.key] = b
        return self.broadcast(self.message(Variant.AVAILABLE_BRANCHES, branches=mine))

    def _on_join_reject(self, sender: str, msg: Message, header: dict) -> list:
        if self.joined or self._pending is None:
            return []
        self._excluded.add(self._pending.key)
        self.open.pop(self._pending.key, None)
        self._pending = None
        if self._attempts >= MAX_JOIN_ATTEMPTS:
            self.join_error = JoinFailed(f"gave up after {self._attempts} attempts")
            return []
        return [(self._contact.node_id, self.app(Tag.SNAPSHOT))]

    def snapshot(self) -> dict:
        return {
            "branches": [b.to_dict() for b in sorted(self.open.values(), key=OpenBranch.sort_key)],
            "members": [n.to_dict() for n in self.member_list()],
        }

    def _merge_snapshot(self, header: dict) -> None:
        for d in header["members"]:
            self.add_member(NodeInfo.from_dict(d))
        # a snapshot replaces the joiner's branch view
        self.open = {}
        for d in header["branches"]:
            b = OpenBranch.from_dict(d)
            if b.key not in self._excluded:
                self.open[b.key] = b

    # ------------------------------------------------------------- broadcast
    def _mark_seen(self, msg_id: bytes) -> bool:
        if msg_id in self.seen:
            self.seen.move_to_end(msg_id)
            return False
        self.seen[msg_id] = None
        if len(self.seen) > self.seen_capacity:
            self.seen.popitem(last=False)
        return True

    def broadcast(self, msg: Message) -> list:
        """Originate ``msg``: apply locally and send to every link."""
        self._mark_seen(msg.msg_id)
        return [(nid, msg) for nid in self.links()]

    def originate(self, data: bytes) -> tuple:
        msg = self.message(Variant.APP, payload=bytes([Tag.DATA]) + bytes(data))
        self.app_inbox.append((self.node_id, bytes(data)))
        return msg, self.broadcast(msg)

    def _apply_broadcast(self, msg: Message) -> None:
        if msg.variant == Variant.AVAILABLE_BRANCHES:
            for b in msg.branches:
                if b.parent_contact is not None:
                    self.add_member(b.parent_contact)
                if not self.members.get(b.child_group_id) and b.key not in self._excluded:
                    self.open[b.key] = b
        elif msg.variant == Variant.DISCARDED_BRANCHES:
            for b in msg.branches:
                self.open.pop(b.key, None)
        else:
            tag, header, blob = parse_app(msg.payload)
            if tag == Tag.DATA:
                self.app_inbox.append((msg.origin.hex(), blob))
            elif tag == Tag.ANNOUNCE:
                self.add_member(NodeInfo.from_dict(header["node"]))

    # -------------------------------------------------------------- dispatch
    def handle_message(self, sender: str, msg: Message) -> list:
        try:
            variant = Variant(msg.variant)
        except ValueError:
            log.warning("ignoring message with unknown variant %r", msg.variant)
            return []
        if variant == Variant.GROUP_ID:
            return self._on_group_id(sender, msg)
        if msg.is_broadcast:
            if not self._mark_seen(msg.msg_id):
                self.duplicates += 1
                return []
            self._apply_broadcast(msg)
            if not self.joined:
                return []
            return [(nid, msg) for nid in self.links() if nid != sender]
        try:
            tag, header, blob = parse_app(msg.payload)
        except (ValueError, KeyError) as exc:
            log.warning("dropping malformed APP message: %s", exc)
            return []
        return self.handle_request(sender, msg, tag, header, blob)

    def handle_request(self, sender: str, msg: Message, tag: int, header: dict, blob: bytes) -> list:
        if tag == Tag.SNAPSHOT:
            return [(sender, self.reply(msg, Tag.SNAPSHOT_REPLY, self.snapshot()))]
        if tag == Tag.SNAPSHOT_REPLY:
            if self.joined or self._contact is None:
                return []
            self._merge_snapshot(header)
            return self._attempt_join()
        if tag == Tag.JOIN:
            return self._on_join_request(sender, msg, header)
        if tag == Tag.JOIN_REJECT:
            return self._on_join_reject(sender, msg, header)
        if tag == Tag.FIND_PREFIX:
            nodes = [n.to_dict() for n in self.neighbors_within().nodes()]
            return [(sender, self.reply(msg, Tag.FIND_PREFIX_REPLY, {"nodes": nodes}))]
        log.warning("ignoring unhandled APP tag %#x", tag)
        return []
