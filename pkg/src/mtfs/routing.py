"""Hash-prefix placement over the overlay tree.

A content hash is read as a bit string; the live nodes whose group ids are
prefixes of it form its group path, and the deepest of them is where new
objects go.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Union

from .errors import InvalidHex, UnreachableNode
from .overlay import NodeInfo

_NIBBLES = {c: format(i, "04b") for i, c in enumerate("0123456789abcdef")}


def hex_to_bits(hex_hash: str) -> str:
    try:
        return "".join(_NIBBLES[c] for c in hex_hash.lower())
    except (KeyError, AttributeError) as exc:
        raise InvalidHex(repr(hex_hash)) from exc


def key_bits(key: str) -> str:
    """Routing bits of a store key: object id or ``<id>_mt``/``<id>_capsule`` alias."""
    return hex_to_bits(key[:64])


Membership = Union[Mapping[str, NodeInfo], Iterable[NodeInfo]]


def _by_gid(members: Membership) -> Mapping[str, NodeInfo]:
    if isinstance(members, Mapping):
        return members
    out = {}
    for n in members:
        out.setdefault(n.group_id, n)
    return out


def group_path(target: str, members: Membership) -> list:
    """Nodes whose group id prefixes ``target``, root first."""
    view = _by_gid(members)
    path = []
    for i in range(len(target) + 1):
        node = view.get(target[:i])
        if node is not None:
            path.append(node)
    return path


def is_prefix_of(gid: str, target: str) -> bool:
    return target.startswith(gid)


def outermost_node(
    target: str,
    start: NodeInfo,
    neighbors: Callable[[NodeInfo], Iterable[NodeInfo]],
    max_hops: int = 4096,
) -> NodeInfo:
    """Walk neighbor tables toward the deepest live node whose id prefixes ``target``.

    ``neighbors(node)`` returns that node's neighbor table, or None when the
    node cannot be contacted.  Unreachable nodes are routed around through
    the other entries already seen; a node counts as found only once it has
    answered.
    """
    seen = {start.node_id: start}
    visited: set = set()
    best = None
    current = start
    for _ in range(max_hops):
        visited.add(current.node_id)
        table = neighbors(current)
        if table is not None:
            if is_prefix_of(current.group_id, target) and (best is None or len(current.group_id) > len(best.group_id)):
                best = current
            for n in table:
                seen.setdefault(n.node_id, n)
        fresh = [n for n in seen.values() if n.node_id not in visited]
        deeper = [
            n for n in fresh
            if is_prefix_of(n.group_id, target) and (best is None or len(n.group_id) > len(best.group_id))
        ]
        if deeper:
            current = max(deeper, key=lambda n: (len(n.group_id), n.group_id))
            continue
        if best is not None:
            return best
        if not fresh:
            raise UnreachableNode("no route toward the root")
        # no prefix match answered yet: climb toward the root
        current = min(fresh, key=lambda n: (len(n.group_id), n.group_id))
    raise UnreachableNode("hop limit exceeded")


def placement_target(
    oid: str,
    members: Membership,
    has_capacity: Optional[Callable[[NodeInfo], bool]] = None,
) -> NodeInfo:
    """Deepest group-path node for ``oid``; skips full nodes when capacity is known."""
    path = group_path(key_bits(oid), members)
    if not path:
        raise UnreachableNode("empty membership")
    if has_capacity is not None:
        for node in reversed(path):
            if has_capacity(node):
                return node
    return path[-1]
