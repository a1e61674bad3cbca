"""Single-sequencer, hash-linked, append-only ledger.

Records two transaction kinds: storage contracts (a user's current root
folder ref plus the group id storing it) and file-send grants.  There is no
consensus; one sealer orders submissions into blocks.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Union

from . import crypto
from .errors import BadSignature, ChainCorrupted, LedgerDown, NotFound
from .merkle import build_root, canonical_json

ZERO_HASH = "00" * 32
SEAL_INTERVAL_MS = 1000
SEAL_MAX_TXS = 16


@dataclass(frozen=True)
class StorageContract:
    owner: str  # pk digest
    root_ref: str  # empty string cancels the subscription
    group_id: str
    accepts: tuple = ()  # FileSend tx ids this root takes in

    kind = "storage_contract"

    @property
    def actor(self) -> str:
        return self.owner

    def to_dict(self) -> dict:
        return {"owner": self.owner, "root_ref": self.root_ref, "group_id": self.group_id, "accepts": list(self.accepts)}


@dataclass(frozen=True)
class FileSend:
    sender: str
    receiver: str
    object_ref: str
    reenc_capsule_ref: str
    name: str = ""
    size: int = 0

    kind = "file_send"

    @property
    def actor(self) -> str:
        return self.sender

    def to_dict(self) -> dict:
        return {
            "sender": self.sender,
            "receiver": self.receiver,
            "object_ref": self.object_ref,
            "reenc_capsule_ref": self.reenc_capsule_ref,
            "name": self.name,
            "size": self.size,
        }


def _body_from_dict(kind: str, d: dict):
    if kind == StorageContract.kind:
        return StorageContract(d["owner"], d["root_ref"], d["group_id"], tuple(d["accepts"]))
    if kind == FileSend.kind:
        return FileSend(d["sender"], d["receiver"], d["object_ref"], d["reenc_capsule_ref"], d["name"], int(d["size"]))
    raise ValueError(f"unknown transaction kind {kind!r}")


@dataclass(frozen=True)
class Transaction:
    body: Union[StorageContract, FileSend]
    signer: str  # serialized public key, hex
    signature: str  # hex

    @staticmethod
    def signing_bytes(body, signer: str) -> bytes:
        return canonical_json({"kind": body.kind, "body": body.to_dict(), "signer": signer})

    @classmethod
    def create(cls, sk: crypto.PrivateKey, body) -> "Transaction":
        signer = sk.public_key.hex()
        sig = crypto.sign(sk, cls.signing_bytes(body, signer))
        return cls(body, signer, sig.hex())

    def to_dict(self) -> dict:
        return {"kind": self.body.kind, "body": self.body.to_dict(), "signer": self.signer, "signature": self.signature}

    @classmethod
    def from_dict(cls, d: dict) -> "Transaction":
        return cls(_body_from_dict(d["kind"], d["body"]), d["signer"], d["signature"])

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @property
    def tx_id(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def verify(self) -> bool:
        try:
            pk = crypto.PublicKey.from_hex(self.signer)
            sig = bytes.fromhex(self.signature)
        except (ValueError, crypto.MalformedKey):
            return False
        if pk.digest() != self.body.actor:
            return False
        return crypto.verify(pk, self.signing_bytes(self.body, self.signer), sig)


@dataclass(frozen=True)
class Receipt:
    height: int
    index: int
    tx_id: str


@dataclass(frozen=True)
class RootPointer:
    owner: str
    root_ref: str
    group_id: str


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: str
    tx_root: str
    timestamp: int
    transactions: tuple = ()

    @staticmethod
    def compute_tx_root(transactions) -> str:
        if not transactions:
            return hashlib.sha256(b"").hexdigest()
        return build_root([tx.tx_id for tx in transactions])

    def header_bytes(self) -> bytes:
        return canonical_json(
            {"height": self.height, "prev_hash": self.prev_hash, "tx_root": self.tx_root, "timestamp": self.timestamp}
        )

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.header_bytes()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "height": self.height,
            "prev_hash": self.prev_hash,
            "tx_root": self.tx_root,
            "timestamp": self.timestamp,
            "transactions": [tx.to_dict() for tx in self.transactions],
            "hash": self.hash,
        }

    def to_bytes(self) -> bytes:
        return canonical_json(self.to_dict())

    @classmethod
    def from_bytes(cls, data: bytes) -> "Block":
        rec = json.loads(data)
        block = cls(
            int(rec["height"]),
            rec["prev_hash"],
            rec["tx_root"],
            int(rec["timestamp"]),
            tuple(Transaction.from_dict(t) for t in rec["transactions"]),
        )
        if block.to_bytes() != data:
            raise ValueError("non-canonical block record")
        if rec["hash"] != block.hash:
            raise ValueError("stored block hash mismatch")
        return block


def genesis(timestamp: int = 0) -> Block:
    return Block(0, ZERO_HASH, Block.compute_tx_root(()), timestamp)


def find_invalid_height(chain) -> Optional[int]:
    """Height of the first block failing a link, tx-root, or signature check."""
    prev = None
    for i, block in enumerate(chain):
        if block.height != i:
            return i
        expected_prev = ZERO_HASH if prev is None else prev.hash
        if block.prev_hash != expected_prev:
            return i
        if block.tx_root != Block.compute_tx_root(block.transactions):
            return i
        if not all(tx.verify() for tx in block.transactions):
            return i
        prev = block
    return None


def verify_chain(chain) -> bool:
    return find_invalid_height(chain) is None


def encode_chain(chain) -> bytes:
    return b"".join(_frame(b.to_bytes()) for b in chain)


def _frame(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def decode_chain(data: bytes) -> list:
    """Parse length-prefixed block records; raise ChainCorrupted on bad framing or records."""
    blocks, pos = [], 0
    while pos < len(data):
        height = len(blocks)
        if pos + 4 > len(data):
            raise ChainCorrupted(height, "truncated length prefix")
        (n,) = struct.unpack(">I", data[pos : pos + 4])
        rec = data[pos + 4 : pos + 4 + n]
        if len(rec) != n:
            raise ChainCorrupted(height, "truncated block record")
        try:
            blocks.append(Block.from_bytes(rec))
        except (ValueError, KeyError, TypeError) as exc:
            raise ChainCorrupted(height, str(exc)) from exc
        pos += 4 + n
    return blocks


def verify_chain_bytes(data: bytes) -> bool:
    try:
        blocks = decode_chain(data)
    except ChainCorrupted:
        return False
    return bool(blocks) and verify_chain(blocks)


class Ledger:
    """The sequencer: accepts signed transactions and seals them into blocks.

    ``clock`` returns milliseconds; by default a logical clock advancing one
    seal interval per block, which keeps chains reproducible.  When ``path``
    is given every sealed block is appended to that file.
    """

    def __init__(self, clock: Optional[Callable[[], int]] = None, path: Optional[Union[str, Path]] = None):
        self._lock = threading.RLock()
        self._logical = 0
        self.clock = clock or self._logical_clock
        self.path = Path(path) if path is not None else None
        self.pending: list = []
        self.available = True
        if self.path is not None and self.path.exists() and self.path.stat().st_size:
            self.blocks = decode_chain(self.path.read_bytes())
            bad = find_invalid_height(self.blocks)
            if bad is not None:
                raise ChainCorrupted(bad, "stored chain fails verification")
            self._logical = self.blocks[-1].timestamp
        else:
            self.blocks = [genesis(self.clock() if clock else 0)]
            self._persist(self.blocks[0])
        self._last_seal = self.blocks[-1].timestamp

    def _logical_clock(self) -> int:
        return self._logical

    def _persist(self, block: Block) -> None:
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "ab") as fh:
            fcntl.flock(fh, fcntl.LOCK_EX)
            fh.write(_frame(block.to_bytes()))
            fh.flush()

    @property
    def height(self) -> int:
        return self.blocks[-1].height

    def submit(self, tx: Transaction) -> Receipt:
        if not self.available:
            raise LedgerDown()
        if not tx.verify():
            raise BadSignature(tx.tx_id)
        with self._lock:
            self.pending.append(tx)
            receipt = Receipt(self.height + 1, len(self.pending) - 1, tx.tx_id)
            if len(self.pending) >= SEAL_MAX_TXS:
                self.seal()
            return receipt

    def tick(self, now: Optional[int] = None) -> Optional[Block]:
        """Seal if the interval elapsed since the last block."""
        now = self.clock() if now is None else now
        with self._lock:
            if self.pending and now - self._last_seal >= SEAL_INTERVAL_MS:
                return self.seal(now)
        return None

    def seal(self, now: Optional[int] = None) -> Optional[Block]:
        with self._lock:
            if not self.pending:
                return None
            if now is None:
                if self.clock == self._logical_clock:
                    self._logical += SEAL_INTERVAL_MS
                now = self.clock()
            txs = tuple(self.pending)
            prev = self.blocks[-1]
            block = Block(prev.height + 1, prev.hash, Block.compute_tx_root(txs), int(now), txs)
            self.blocks.append(block)
            self.pending = []
            self._last_seal = block.timestamp
            self._persist(block)
            return block

    def wait_for(self, receipt: Receipt) -> Block:
        """Block containing ``receipt``; seals the pending batch if needed."""
        if receipt.height > self.height:
            self.seal()
        block = self.blocks[receipt.height]
        if block.transactions[receipt.index].tx_id != receipt.tx_id:
            raise NotFound(receipt.tx_id)
        return block

    def transactions(self):
        """(height, index, tx) for every sealed transaction, in order."""
        for block in self.blocks:
            for i, tx in enumerate(block.transactions):
                yield block.height, i, tx

    def find(self, tx_id: str) -> Transaction:
        for _, _, tx in self.transactions():
            if tx.tx_id == tx_id:
                return tx
        raise NotFound(tx_id)

    def latest_root(self, owner: str) -> RootPointer:
        latest = None
        for _, _, tx in self.transactions():
            if isinstance(tx.body, StorageContract) and tx.body.owner == owner:
                latest = tx.body
        if latest is None or not latest.root_ref:
            raise NotFound(owner)
        return RootPointer(owner, latest.root_ref, latest.group_id)

    def pending_shares(self, receiver: str) -> list:
        grants, accepted = [], set()
        for _, _, tx in self.transactions():
            body = tx.body
            if isinstance(body, FileSend) and body.receiver == receiver:
                grants.append(tx)
            elif isinstance(body, StorageContract) and body.owner == receiver:
                accepted.update(body.accepts)
        return [tx for tx in grants if tx.tx_id not in accepted]

    def verify(self) -> bool:
        return verify_chain(self.blocks)

    def to_bytes(self) -> bytes:
        return encode_chain(self.blocks)
