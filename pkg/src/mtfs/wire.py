"""Binary frame codec for overlay messages.

Frame layout (big-endian)::

    u32 length | u8 version=1 | u8 variant | 32B msg_id | 32B origin | payload

``length`` counts every byte after itself.  Group ids are a u16 bit length
followed by the bits packed MSB first.  Branch lists are a u16 count of
``gid | u8 side | u8 has_contact | [contact]`` records; a contact is
``32B node_id | u8 host_len | host | u16 port | gid``.
"""

from __future__ import annotations

import struct

from .errors import MalformedFrame, Truncated, UnknownVariant, VersionError
from .overlay import Message, NodeInfo, OpenBranch, Variant

VERSION = 1
HEADER = struct.Struct(">IBB32s32s")
MAX_FRAME = 64 * 1024 * 1024


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise Truncated(f"need {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def done(self) -> bool:
        return self.pos == len(self.data)


def encode_group_id(gid: str) -> bytes:
    nbits = len(gid)
    packed = int(gid, 2) << (-nbits % 8) if gid else 0
    return struct.pack(">H", nbits) + packed.to_bytes((nbits + 7) // 8, "big")


def _read_group_id(r: _Reader) -> str:
    nbits = r.u16()
    raw = r.take((nbits + 7) // 8)
    if not nbits:
        return ""
    value = int.from_bytes(raw, "big") >> (-nbits % 8)
    return format(value, f"0{nbits}b")


def decode_group_id(data: bytes) -> str:
    return _read_group_id(_Reader(data))


def _encode_contact(n: NodeInfo) -> bytes:
    host = n.host.encode()
    if len(host) > 255:
        raise ValueError("host name too long")
    return bytes.fromhex(n.node_id) + bytes([len(host)]) + host + struct.pack(">H", n.port) + encode_group_id(n.group_id)


def _read_contact(r: _Reader) -> NodeInfo:
    nid = r.take(32).hex()
    try:
        host = r.take(r.u8()).decode()
    except UnicodeDecodeError as exc:
        raise MalformedFrame("host is not UTF-8") from exc
    port = r.u16()
    return NodeInfo(nid, host, port, _read_group_id(r))


def _encode_branches(branches) -> bytes:
    out = [struct.pack(">H", len(branches))]
    for b in branches:
        out.append(encode_group_id(b.parent_group_id))
        out.append(bytes([b.side, b.parent_contact is not None]))
        if b.parent_contact is not None:
            out.append(_encode_contact(b.parent_contact))
    return b"".join(out)


def _read_branches(r: _Reader) -> tuple:
    out = []
    for _ in range(r.u16()):
        gid = _read_group_id(r)
        side, has = r.u8(), r.u8()
        out.append(OpenBranch(gid, side, _read_contact(r) if has else None))
    return tuple(out)


def encode(msg: Message) -> bytes:
    if msg.variant in (Variant.AVAILABLE_BRANCHES, Variant.DISCARDED_BRANCHES):
        body = _encode_branches(msg.branches)
    elif msg.variant == Variant.GROUP_ID:
        body = encode_group_id(msg.group_id)
    elif msg.variant == Variant.APP:
        body = msg.payload
    else:
        raise UnknownVariant(msg.variant)
    length = HEADER.size - 4 + len(body)
    return HEADER.pack(length, VERSION, msg.variant, msg.msg_id, msg.origin) + body


def frame_length(prefix: bytes) -> int:
    """Total frame size given at least its first 4 bytes."""
    if len(prefix) < 4:
        raise Truncated("need 4 length bytes")
    (n,) = struct.unpack(">I", prefix[:4])
    return 4 + n


def decode(frame: bytes) -> Message:
    frame = bytes(frame)
    if len(frame) < HEADER.size:
        raise Truncated(f"frame shorter than header ({len(frame)} bytes)")
    length, version, variant, msg_id, origin = HEADER.unpack_from(frame)
    if length < HEADER.size - 4:
        raise Truncated("length prefix shorter than header")
    if len(frame) < 4 + length:
        raise Truncated(f"frame declares {length} bytes, has {len(frame) - 4}")
    if len(frame) > 4 + length:
        raise MalformedFrame("trailing bytes after frame")
    if version != VERSION:
        raise VersionError(version)
    r = _Reader(frame[HEADER.size :])
    if variant in (Variant.AVAILABLE_BRANCHES, Variant.DISCARDED_BRANCHES):
        msg = Message(variant, msg_id, origin, branches=_read_branches(r))
    elif variant == Variant.GROUP_ID:
        msg = Message(variant, msg_id, origin, group_id=_read_group_id(r))
    elif variant == Variant.APP:
        return Message(variant, msg_id, origin, payload=r.take(len(r.data)))
    else:
        raise UnknownVariant(variant)
    if not r.done():
        raise MalformedFrame("unparsed trailing payload")
    return msg
