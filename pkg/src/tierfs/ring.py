"""Consistent-hash placement of inode metadata and chunks.

Every node owns the half-open arc ``[node_point, successor_point)``: a key
belongs to the node with the greatest point not above the key's hash, and
keys hashing below the smallest point wrap around to the node with the
largest point. There is exactly one point per node.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3
MASK64 = (1 << 64) - 1

MEMBERSHIP_KEY = "__membership__"


class RingError(ValueError):
    pass


class AlignmentError(RingError):
    pass


class NoOwner(RingError):
    pass


class UnsupportedDiff(RingError):
    pass


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h ^= b
        h = (h * FNV64_PRIME) & MASK64
    return h


def fmix64(h: int) -> int:
    """MurmurHash3's 64-bit finalizer: spreads every input bit over the whole word."""
    h ^= h >> 33
    h = (h * 0xFF51AFD7ED558CCD) & MASK64
    h ^= h >> 33
    h = (h * 0xC4CEB9FE1A85EC53) & MASK64
    h ^= h >> 33
    return h


def hash_key(key: str | bytes) -> int:
    """Stable 64-bit hash of a placement key: FNV-1a over UTF-8 bytes, then fmix64.

    Plain FNV-1a leaves the high bits of short, similar keys ("n1", "n2")
    nearly identical, which would hand one node almost the whole ring.
    """
    if isinstance(key, str):
        key = key.encode("utf-8")
    if not key:
        raise RingError("empty placement key")
    return fmix64(fnv1a64(key))


def placement_key(inode: int, chunk_offset: int | None = None, chunk_size: int | None = None) -> str:
    """Key used to place an inode's metadata (or one of its chunks).

    Offset 0 deliberately maps to the bare inode key so the first chunk
    lives with the metadata.
    """
    if inode < 0:
        raise RingError(f"negative inode id {inode}")
    if chunk_offset is None or chunk_offset == 0:
        return str(inode)
    if chunk_offset < 0:
        raise AlignmentError(f"negative chunk offset {chunk_offset}")
    if chunk_size is not None and chunk_offset % chunk_size:
        raise AlignmentError(f"offset {chunk_offset} not aligned to chunk size {chunk_size}")
    return f"{inode}/{chunk_offset}"


@dataclass(frozen=True)
class Ring:
    version: int = 0
    points: tuple[tuple[int, str], ...] = ()
    _keys: tuple[int, ...] = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        pts = tuple(sorted(self.points))
        hashes = tuple(p for p, _ in pts)
        if len(set(hashes)) != len(hashes):
            raise RingError("duplicate hash points in ring")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "_keys", hashes)

    @classmethod
    def from_nodes(cls, nodes: Iterable[str], version: int = 1) -> "Ring":
        return cls(version, tuple((hash_key(n), n) for n in nodes))

    @property
    def nodes(self) -> list[str]:
        return [n for _, n in self.points]

    def __contains__(self, node_id: str) -> bool:
        return any(n == node_id for _, n in self.points)

    def __len__(self) -> int:
        return len(self.points)

    def with_node(self, node_id: str) -> "Ring":
        if node_id in self:
            raise RingError(f"{node_id} already in ring")
        return Ring(self.version + 1, self.points + ((hash_key(node_id), node_id),))

    def without_node(self, node_id: str) -> "Ring":
        if node_id not in self:
            raise RingError(f"{node_id} not in ring")
        return Ring(self.version + 1, tuple(p for p in self.points if p[1] != node_id))

    def owner_of_hash(self, h: int) -> str:
        if not self.points:
            raise NoOwner("empty ring")
        # greatest point <= h, else wrap to the maximum point
        i = bisect.bisect_right(self._keys, h) - 1
        return self.points[i][1]

    def owner(self, key: str | bytes) -> str:
        return self.owner_of_hash(hash_key(key))

    def to_wire(self) -> dict:
        return {
            "version": self.version,
            "members": [{"node": n, "addr": n, "point": p} for p, n in self.points],
        }

    @classmethod
    def from_wire(cls, data: dict) -> "Ring":
        return cls(data["version"], tuple((m["point"], m["node"]) for m in data["members"]))


def owner(ring: Ring, key: str | bytes) -> str:
    return ring.owner(key)


def diff_owners(old: Ring, new: Ring, keys: Iterable[str]) -> set[tuple[str, str, str]]:
    """Keys whose owner differs between two rings that differ by one node."""
    old_nodes, new_nodes = set(old.nodes), set(new.nodes)
    if len(old_nodes ^ new_nodes) != 1 or not (old_nodes <= new_nodes or new_nodes <= old_nodes):
        raise UnsupportedDiff("rings must differ by exactly one node")
    if not old.points or not new.points:
        raise UnsupportedDiff("cannot diff against an empty ring")
    changed = set()
    for k in keys:
        a, b = old.owner(k), new.owner(k)
        if a != b:
            changed.add((k, a, b))
    return changed
