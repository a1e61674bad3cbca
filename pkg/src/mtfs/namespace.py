"""Encrypted folder objects.

A folder is a canonical JSON record mapping names to entries; it is the only
place file names live.  Folder values are immutable: mutations return a new
folder.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from . import crypto, merkle
from .errors import DuplicateName, MalformedFolder, NameNotFound

FILE = "file"
FOLDER = "folder"


@dataclass(frozen=True)
class FolderEntry:
    name: str
    kind: str
    object_ref: str
    size: int
    capsule_ref: str

    def __post_init__(self):
        if self.kind not in (FILE, FOLDER):
            raise MalformedFolder(f"unknown entry kind {self.kind!r}")
        if self.size < 0:
            raise MalformedFolder("negative size")
        if not self.name or "/" in self.name:
            raise MalformedFolder(f"invalid entry name {self.name!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "object_ref": self.object_ref, "size": self.size, "capsule_ref": self.capsule_ref}


@dataclass(frozen=True)
class FolderObject:
    entries: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(sorted(self.entries.items()))))

    def __eq__(self, other):
        return isinstance(other, FolderObject) and dict(self.entries) == dict(other.entries)

    def __hash__(self):
        return hash(encode_folder(self))

    @property
    def total_size(self) -> int:
        return sum(e.size for e in self.entries.values())

    def __contains__(self, name):
        return name in self.entries

    def __getitem__(self, name) -> FolderEntry:
        try:
            return self.entries[name]
        except KeyError:
            raise NameNotFound(name) from None

    def __len__(self):
        return len(self.entries)


def encode_folder(f: FolderObject) -> bytes:
    return merkle.canonical_json(
        {
            "version": 1,
            "entries": {name: e.to_dict() for name, e in f.entries.items()},
            "total_size": f.total_size,
        }
    )


def decode_folder(data: bytes) -> FolderObject:
    try:
        rec = json.loads(data)
        if rec.get("version") != 1:
            raise MalformedFolder(f"unsupported folder version {rec.get('version')!r}")
        entries = {
            name: FolderEntry(name, e["kind"], e["object_ref"], int(e["size"]), e["capsule_ref"])
            for name, e in rec["entries"].items()
        }
        folder = FolderObject(entries)
        if folder.total_size != rec["total_size"]:
            raise MalformedFolder("total_size does not match entries")
    except MalformedFolder:
        raise
    except (ValueError, KeyError, TypeError, AttributeError) as exc:
        raise MalformedFolder(str(exc)) from exc
    return folder


def add_entry(f: FolderObject, entry: FolderEntry) -> FolderObject:
    if entry.name in f.entries:
        raise DuplicateName(entry.name)
    return FolderObject({**f.entries, entry.name: entry})


def remove_entry(f: FolderObject, name: str) -> FolderObject:
    if name not in f.entries:
        raise NameNotFound(name)
    return FolderObject({k: v for k, v in f.entries.items() if k != name})


def replace_entry(f: FolderObject, entry: FolderEntry) -> FolderObject:
    return FolderObject({**f.entries, entry.name: entry})


def folder_total(f: FolderObject) -> int:
    """Bytes under ``f``; subfolder entries already carry their subtree total."""
    return f.total_size


def seal_folder(owner: crypto.PublicKey, f: FolderObject, seed=None) -> tuple:
    """Encrypt and chunk a folder: ``(ciphertext, capsule, ChunkingResult)``."""
    ct, capsule = crypto.encrypt(owner, encode_folder(f), seed=seed)
    return ct, capsule, merkle.chunk(ct)


def open_folder(sk: crypto.PrivateKey, capsule: crypto.Capsule, ciphertext: bytes) -> FolderObject:
    return decode_folder(crypto.decrypt(sk, capsule, ciphertext))


def split_path(path: str) -> list:
    parts = [p for p in path.strip("/").split("/") if p]
    return parts
