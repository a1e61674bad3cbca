"""Hybrid proxy re-encryption: ElGamal-style KEM on secp256k1 plus ChaCha20-Poly1305.

An encryption yields a ciphertext and a small capsule ``(E, V, s)`` with
``E = rG``, ``V = uG``, ``s = u + r*H(E, V)``.  The data key comes from
``(r + u) * A`` where ``A`` is the owner's public key.  A re-encryption key
``rk = a / d`` (``d`` derived from an ephemeral point ``X`` and the receiver's
key) turns the capsule into ``(rk*E, rk*V, X)``; the receiver recovers the
same point as ``d * (E' + V')``.  The ciphertext never takes part.

Group arithmetic is delegated to libsecp256k1 through coincurve; scalars are
plain Python ints modulo the curve order.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass
from typing import Optional, Union

import coincurve
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import (
    AlreadyReencrypted,
    CapsuleMismatch,
    InvalidCapsule,
    MalformedKey,
    WrongKey,
)

ORDER = 0xFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFFEBAAEDCE6AF48A03BBFD25E8CD0364141
VERSION = 1
POINT_SIZE = 33
SCALAR_SIZE = 32
AEAD_OVERHEAD = 16

# record flags
FLAG_PUBLIC = 0x10
FLAG_PRIVATE = 0x11
FLAG_REKEY = 0x20
FLAG_ORIGINAL = 0x00
FLAG_REENCRYPTED = 0x01

Seed = Union[bytes, int, str, None]


def _seed_bytes(seed: Seed) -> Optional[bytes]:
    if seed is None or isinstance(seed, bytes):
        return seed
    if isinstance(seed, int):
        return seed.to_bytes(max(1, (seed.bit_length() + 8) // 8), "big", signed=True)
    return seed.encode()


def hash_to_scalar(label: bytes, *parts: bytes) -> int:
    h = hashlib.sha512(label)
    for p in parts:
        h.update(len(p).to_bytes(4, "big"))
        h.update(p)
    return int.from_bytes(h.digest(), "big") % (ORDER - 1) + 1


def _random_scalar(label: bytes, seed: Optional[bytes], *context: bytes) -> int:
    if seed is None:
        return secrets.randbelow(ORDER - 1) + 1
    return hash_to_scalar(label, seed, *context)


def _sb(k: int) -> bytes:
    return (k % ORDER).to_bytes(32, "big")


def _base(k: int) -> coincurve.PublicKey:
    return coincurve.PublicKey.from_secret(_sb(k))


def _mul(point: coincurve.PublicKey, k: int) -> coincurve.PublicKey:
    return point.multiply(_sb(k))


def _add(*points: coincurve.PublicKey) -> coincurve.PublicKey:
    return coincurve.PublicKey.combine_keys(list(points))


def _point(raw: bytes) -> coincurve.PublicKey:
    try:
        return coincurve.PublicKey(raw)
    except (ValueError, TypeError) as exc:
        raise MalformedKey("invalid curve point") from exc


def _enc(point: coincurve.PublicKey) -> bytes:
    return point.format(compressed=True)


def _check_header(data: bytes, flag: int, size: int) -> None:
    if len(data) != size:
        raise MalformedKey(f"expected {size} bytes, got {len(data)}")
    if data[0] != VERSION:
        raise MalformedKey(f"unsupported version {data[0]}")
    if data[1] != flag:
        raise MalformedKey(f"unexpected record flag {data[1]:#x}")


@dataclass(frozen=True)
class PublicKey:
    point: bytes  # compressed secp256k1 point

    def to_bytes(self) -> bytes:
        return bytes([VERSION, FLAG_PUBLIC]) + self.point

    @classmethod
    def from_bytes(cls, data: bytes) -> "PublicKey":
        _check_header(data, FLAG_PUBLIC, 2 + POINT_SIZE)
        _point(data[2:])
        return cls(bytes(data[2:]))

    def hex(self) -> str:
        return self.to_bytes().hex()

    @classmethod
    def from_hex(cls, text: str) -> "PublicKey":
        try:
            return cls.from_bytes(bytes.fromhex(text))
        except ValueError as exc:
            raise MalformedKey(str(exc)) from exc

    def digest(self) -> str:
        """Stable identity of this key: SHA-256 of its serialized form."""
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def _cc(self) -> coincurve.PublicKey:
        return _point(self.point)


@dataclass(frozen=True)
class PrivateKey:
    scalar: int

    def __repr__(self):
        return "PrivateKey(<secret>)"

    @property
    def public_key(self) -> PublicKey:
        return PublicKey(_enc(_base(self.scalar)))

    def to_bytes(self) -> bytes:
        return bytes([VERSION, FLAG_PRIVATE]) + _sb(self.scalar)

    @classmethod
    def from_bytes(cls, data: bytes) -> "PrivateKey":
        _check_header(data, FLAG_PRIVATE, 2 + SCALAR_SIZE)
        k = int.from_bytes(data[2:], "big")
        if not 0 < k < ORDER:
            raise MalformedKey("scalar out of range")
        return cls(k)


@dataclass(frozen=True)
class KeyPair:
    private: PrivateKey
    public: PublicKey


@dataclass(frozen=True)
class Capsule:
    e: bytes
    v: bytes
    s: Optional[int] = None  # original capsules only
    x: Optional[bytes] = None  # re-encrypted capsules only

    @property
    def reencrypted(self) -> bool:
        return self.x is not None

    def to_bytes(self) -> bytes:
        if self.reencrypted:
            return bytes([VERSION, FLAG_REENCRYPTED]) + self.e + self.v + self.x
        return bytes([VERSION, FLAG_ORIGINAL]) + self.e + self.v + _sb(self.s)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Capsule":
        try:
            return cls._parse(bytes(data))
        except MalformedKey as exc:
            raise InvalidCapsule(str(exc)) from exc

    @classmethod
    def _parse(cls, data: bytes) -> "Capsule":
        if len(data) < 2 or data[0] != VERSION:
            raise MalformedKey("bad capsule header")
        if data[1] == FLAG_ORIGINAL:
            _check_header(data, FLAG_ORIGINAL, 2 + 2 * POINT_SIZE + SCALAR_SIZE)
            e, v = data[2:35], data[35:68]
            _point(e), _point(v)
            return cls(e, v, s=int.from_bytes(data[68:], "big"))
        _check_header(data, FLAG_REENCRYPTED, 2 + 3 * POINT_SIZE)
        e, v, x = data[2:35], data[35:68], data[68:]
        _point(e), _point(v), _point(x)
        return cls(e, v, x=x)

    def is_valid(self) -> bool:
        """Check ``sG == V + H(E, V) * E`` for an original capsule."""
        if self.reencrypted:
            return False
        h = hash_to_scalar(b"mtfs/capsule", self.e, self.v)
        lhs = _base(self.s)
        rhs = _add(_point(self.v), _mul(_point(self.e), h))
        return _enc(lhs) == _enc(rhs)


@dataclass(frozen=True)
class ReencryptionKey:
    rk: int
    x: bytes  # ephemeral point X = xG

    def to_bytes(self) -> bytes:
        return bytes([VERSION, FLAG_REKEY]) + _sb(self.rk) + self.x

    @classmethod
    def from_bytes(cls, data: bytes) -> "ReencryptionKey":
        _check_header(data, FLAG_REKEY, 2 + SCALAR_SIZE + POINT_SIZE)
        _point(data[34:])
        return cls(int.from_bytes(data[2:34], "big"), bytes(data[34:]))


def keygen(seed: Seed = None) -> KeyPair:
    seed = _seed_bytes(seed)
    k = _random_scalar(b"mtfs/keygen", seed)
    sk = PrivateKey(k)
    return KeyPair(sk, sk.public_key)


def _dem(shared_point: coincurve.PublicKey) -> ChaCha20Poly1305:
    key = HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"mtfs/dem").derive(
        _enc(shared_point)
    )
    return ChaCha20Poly1305(key)


# each data key is used for exactly one message, so a constant nonce is safe
_NONCE = bytes(12)


def encrypt(pk: PublicKey, plaintext: bytes, seed: Seed = None) -> tuple:
    """Return ``(ciphertext, capsule)`` for ``plaintext`` under ``pk``."""
    seed = _seed_bytes(seed)
    # plaintext digest in the context keeps seeded keys distinct per message
    pt_digest = hashlib.sha256(plaintext).digest()
    r = _random_scalar(b"mtfs/enc-r", seed, pk.point, pt_digest)
    u = _random_scalar(b"mtfs/enc-u", seed, pk.point, pt_digest)
    e, v = _enc(_base(r)), _enc(_base(u))
    h = hash_to_scalar(b"mtfs/capsule", e, v)
    s = (u + r * h) % ORDER
    shared = _mul(pk._cc(), (r + u) % ORDER)
    ct = _dem(shared).encrypt(_NONCE, bytes(plaintext), None)
    return ct, Capsule(e, v, s=s)


def decrypt_own(sk: PrivateKey, capsule: Capsule, ct: bytes) -> bytes:
    if capsule.reencrypted:
        raise CapsuleMismatch("re-encrypted capsule needs decrypt_shared")
    shared = _mul(_add(_point(capsule.e), _point(capsule.v)), sk.scalar)
    try:
        return _dem(shared).decrypt(_NONCE, bytes(ct), None)
    except InvalidTag as exc:
        raise WrongKey() from exc


def _delegation_scalar(x_point: bytes, receiver: bytes, dh_point: bytes) -> int:
    return hash_to_scalar(b"mtfs/delegate", x_point, receiver, dh_point)


def rekey(sk_sender: PrivateKey, pk_receiver: PublicKey, seed: Seed = None) -> ReencryptionKey:
    seed = _seed_bytes(seed)
    x = _random_scalar(b"mtfs/rekey-x", seed, _sb(sk_sender.scalar), pk_receiver.point)
    x_point = _enc(_base(x))
    dh = _enc(_mul(pk_receiver._cc(), x))
    d = _delegation_scalar(x_point, pk_receiver.point, dh)
    rk = sk_sender.scalar * pow(d, -1, ORDER) % ORDER
    return ReencryptionKey(rk, x_point)


def reencrypt(rk: ReencryptionKey, capsule: Capsule) -> Capsule:
    """Re-target a capsule.  Takes no ciphertext: the bulk data is never touched."""
    if capsule.reencrypted:
        raise AlreadyReencrypted()
    if not capsule.is_valid():
        raise InvalidCapsule()
    e2 = _enc(_mul(_point(capsule.e), rk.rk))
    v2 = _enc(_mul(_point(capsule.v), rk.rk))
    return Capsule(e2, v2, x=rk.x)


def decrypt_shared(sk_receiver: PrivateKey, capsule: Capsule, ct: bytes) -> bytes:
    if not capsule.reencrypted:
        raise CapsuleMismatch("original capsule needs decrypt_own")
    receiver = sk_receiver.public_key.point
    dh = _enc(_mul(_point(capsule.x), sk_receiver.scalar))
    d = _delegation_scalar(capsule.x, receiver, dh)
    shared = _mul(_add(_point(capsule.e), _point(capsule.v)), d)
    try:
        return _dem(shared).decrypt(_NONCE, bytes(ct), None)
    except InvalidTag as exc:
        raise WrongKey() from exc


def decrypt(sk: PrivateKey, capsule: Capsule, ct: bytes) -> bytes:
    """Dispatch on the capsule flag."""
    if capsule.reencrypted:
        return decrypt_shared(sk, capsule, ct)
    return decrypt_own(sk, capsule, ct)


# signatures over the same key pairs (ECDSA/secp256k1, RFC 6979 nonces)

def sign(sk: PrivateKey, message: bytes) -> bytes:
    return coincurve.PrivateKey(_sb(sk.scalar)).sign(message)


def verify(pk: PublicKey, message: bytes, signature: bytes) -> bool:
    try:
        return pk._cc().verify(signature, message)
    except (ValueError, TypeError, InvalidSignature, MalformedKey):
        return False
