"""Per-node inode store: metadata, chunks with staged writes, directory tables.

All mutations go through :meth:`NodeStore.apply`, which is deterministic in
its inputs so replaying the log reproduces identical state.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

from .commands import Cmd
from .raftlog import RaftLog, SecondLevelRef

FILE = "file"
DIR = "dir"

ROOT_INODE = 1
ORDINAL_SHIFT = 40

DEFAULT_CHUNK_SIZE = 16 * 1024 * 1024

Fetch = Callable[[str, str, int, int], bytes]


def make_inode_id(ordinal: int, counter: int) -> int:
    return (ordinal << ORDINAL_SHIFT) | counter


def inode_ordinal(inode: int) -> int:
    return inode >> ORDINAL_SHIFT


def bucket_inode(buckets: list[str], bucket: str) -> int:
    return 2 + sorted(buckets).index(bucket)


@dataclass
class InodeMeta:
    inode: int
    kind: str
    size: int = 0
    mode: int = 0o644
    mtime: int = 0
    dirty: bool = False
    deleted: bool = False
    bucket: str = ""
    key: str = ""
    ext_key: str | None = None
    ext_bucket: str | None = None
    ext_etag: str | None = None
    ext_len: int = 0
    version: int = 0
    dirty_since: int | None = None
    listed: bool = True

    @property
    def is_dir(self) -> bool:
        return self.kind == DIR

    def to_wire(self) -> dict:
        return asdict(self)

    @classmethod
    def from_wire(cls, d: dict) -> "InodeMeta":
        return cls(**d)

    def ext_binding(self) -> dict | None:
        if self.ext_key is None or self.ext_len <= 0:
            return None
        return {"bucket": self.ext_bucket or self.bucket, "key": self.ext_key, "len": self.ext_len,
                "etag": self.ext_etag}


@dataclass
class Piece:
    """A run of bytes inside a chunk: either second-level data or an external fetch."""

    at: int
    length: int
    sl: SecondLevelRef | None = None
    bucket: str | None = None
    key: str | None = None
    obj_off: int = 0

    @property
    def external(self) -> bool:
        return self.sl is None

    def to_wire(self) -> dict:
        if self.sl is not None:
            return {"at": self.at, "len": self.length, "sl": self.sl.to_wire()}
        return {"at": self.at, "len": self.length, "ext": [self.bucket, self.key, self.obj_off]}

    @classmethod
    def from_wire(cls, d: dict) -> "Piece":
        if "sl" in d:
            return cls(d["at"], d["len"], SecondLevelRef.from_wire(d["sl"]))
        bucket, key, off = d["ext"]
        return cls(d["at"], d["len"], None, bucket, key, off)

    def clipped(self, limit: int) -> "Piece | None":
        """The part of this piece below intra-chunk offset ``limit``."""
        if self.at >= limit:
            return None
        if self.at + self.length <= limit:
            return self
        n = limit - self.at
        sl = SecondLevelRef(self.sl.file_id, self.sl.offset, n) if self.sl else None
        return Piece(self.at, n, sl, self.bucket, self.key, self.obj_off)


@dataclass
class Chunk:
    inode: int
    offset: int
    length: int = 0
    dirty: bool = False
    pieces: list[Piece] = field(default_factory=list)

    def to_wire(self) -> dict:
        return {
            "inode": self.inode,
            "offset": self.offset,
            "length": self.length,
            "dirty": self.dirty,
            "pieces": [p.to_wire() for p in self.pieces],
        }

    @classmethod
    def from_wire(cls, d: dict) -> "Chunk":
        return cls(d["inode"], d["offset"], d["length"], d["dirty"], [Piece.from_wire(p) for p in d["pieces"]])

    def sl_bytes(self) -> int:
        return sum(p.length for p in self.pieces if p.sl is not None)


class DirTable:
    """Directory contents: name -> (child inode, kind)."""

    def __init__(self, entries: dict[str, tuple[int, str]] | None = None):
        self.entries: dict[str, tuple[int, str]] = dict(entries or {})

    def serialize(self) -> bytes:
        out = bytearray()
        for name in sorted(self.entries):
            child, kind = self.entries[name]
            raw = name.encode("utf-8")
            out += struct.pack("<H", len(raw)) + raw + struct.pack("<QB", child, kind == DIR)
        return bytes(out)

    @classmethod
    def deserialize(cls, data: bytes) -> "DirTable":
        entries, i = {}, 0
        while i < len(data):
            (n,) = struct.unpack_from("<H", data, i)
            i += 2
            name = data[i:i + n].decode("utf-8")
            i += n
            child, is_dir = struct.unpack_from("<QB", data, i)
            i += 9
            entries[name] = (child, DIR if is_dir else FILE)
        return cls(entries)

    def names(self) -> list[str]:
        return sorted(self.entries)

    def to_wire(self) -> list:
        return [[n, c, k] for n, (c, k) in sorted(self.entries.items())]

    @classmethod
    def from_wire(cls, rows: list) -> "DirTable":
        return cls({n: (c, k) for n, c, k in rows})

    def __len__(self) -> int:
        return len(self.entries)


def split_range(offset: int, length: int, chunk_size: int) -> list[tuple[int, int, int]]:
    """Split a byte range at chunk boundaries into (chunk_offset, intra_offset, length)."""
    out = []
    end = offset + length
    pos = offset
    while pos < end:
        chunk = pos - pos % chunk_size
        n = min(end, chunk + chunk_size) - pos
        out.append((chunk, pos - chunk, n))
        pos += n
    return out


class NodeStore:
    def __init__(self, chunk_size: int = DEFAULT_CHUNK_SIZE, log: RaftLog | None = None):
        self.chunk_size = chunk_size
        self.log = log
        self.metas: dict[int, InodeMeta] = {}
        self.dirs: dict[int, DirTable] = {}
        self.chunks: dict[tuple[int, int], Chunk] = {}
        self.pending: dict[tuple[int, int], dict[str, Piece]] = {}
        self.folded: set[str] = set()
        self.conflicts: dict[int, set[str]] = {}
        self.max_counter = 0
        self.ordinal = 0

    # -- apply ---------------------------------------------------------

    def apply(self, cmd: int, body: dict) -> None:
        handler = _APPLY.get(Cmd(cmd))
        if handler is None:
            raise ValueError(f"command {Cmd(cmd).name} is not a store operation")
        handler(self, body)

    def apply_ops(self, ops: Iterable) -> None:
        for cmd, body in ops:
            self.apply(cmd, body)

    def note_inode(self, inode: int) -> None:
        if self.ordinal and inode_ordinal(inode) == self.ordinal:
            self.max_counter = max(self.max_counter, inode & ((1 << ORDINAL_SHIFT) - 1))

    def _touch_meta(self, meta: InodeMeta, mtime: int | None, dirty: bool = True) -> None:
        meta.version += 1
        if mtime is not None:
            meta.mtime = mtime
        if dirty:
            if not meta.dirty:
                meta.dirty_since = mtime if mtime is not None else meta.mtime
            meta.dirty = True

    def _create(self, b: dict) -> None:
        meta = InodeMeta.from_wire(b["meta"])
        self.metas[meta.inode] = meta
        if meta.is_dir:
            self.dirs.setdefault(meta.inode, DirTable())
            meta.size = len(self.dirs[meta.inode].serialize())
        self.note_inode(meta.inode)

    def _dir_add(self, b: dict) -> None:
        table = self.dirs.setdefault(b["dir"], DirTable())
        for name, child, kind in b["entries"]:
            table.entries[name] = (child, kind)
            self.note_inode(child)
        if b.get("conflicts"):
            self.conflicts.setdefault(b["dir"], set()).update(b["conflicts"])
        meta = self.metas.get(b["dir"])
        if meta is not None:
            if b.get("listed"):
                meta.listed = True
            if b.get("dirty", True):
                self._touch_meta(meta, b.get("mtime"))
            meta.size = len(table.serialize())

    def _dir_remove(self, b: dict) -> None:
        table = self.dirs.get(b["dir"])
        if table is not None:
            table.entries.pop(b["name"], None)
        meta = self.metas.get(b["dir"])
        if meta is not None:
            self._touch_meta(meta, b.get("mtime"))
            meta.size = len(table.serialize()) if table else 0

    def _set_deleted(self, b: dict) -> None:
        meta = self.metas.get(b["inode"])
        if meta is None:
            return
        meta.deleted = True
        meta.size = 0
        meta.ext_len = 0
        self._touch_meta(meta, b.get("mtime"))
        if meta.is_dir:
            self.dirs[meta.inode] = DirTable()

    def _truncate(self, b: dict) -> None:
        if "chunk" in b:
            chunk = self.chunks.get((b["inode"], b["chunk"]))
            if chunk is None:
                return
            limit = b["length"]
            chunk.pieces = [p for p in (q.clipped(limit) for q in chunk.pieces) if p is not None]
            chunk.length = min(chunk.length, limit)
            chunk.dirty = True
            return
        meta = self.metas.get(b["inode"])
        if meta is None:
            return
        meta.size = b["size"]
        meta.ext_len = min(meta.ext_len, b["size"])
        self._touch_meta(meta, b.get("mtime"))

    def _update_meta(self, b: dict) -> None:
        meta = self.metas.get(b["inode"])
        if meta is None:
            return
        if "size_at_least" in b:
            meta.size = max(meta.size, b["size_at_least"])
        if "mode" in b:
            meta.mode = b["mode"]
        self._touch_meta(meta, b.get("mtime"))

    def _fold(self, b: dict) -> None:
        key = (b["inode"], b["chunk"])
        chunk = self.chunks.get(key)
        if chunk is None:
            chunk = self.chunks[key] = Chunk(b["inode"], b["chunk"])
            ext = b.get("ext")
            if ext and ext["len"] > b["chunk"]:
                n = min(self.chunk_size, ext["len"] - b["chunk"])
                chunk.pieces.append(Piece(0, n, None, ext["bucket"], ext["key"], b["chunk"]))
                chunk.length = n
        staged = self.pending.get(key, {})
        for sid in b["sids"]:
            piece = staged.pop(sid, None)
            self.folded.add(sid)
            if piece is None:
                continue
            chunk.pieces.append(piece)
            chunk.length = max(chunk.length, piece.at + piece.length)
        if not staged:
            self.pending.pop(key, None)
        chunk.dirty = True

    def _localize(self, b: dict) -> None:
        key = (b["inode"], b["chunk"])
        length = b["length"]
        pieces = [Piece(0, length, SecondLevelRef.from_wire(b["ref"]))] if length else []
        self.chunks[key] = Chunk(b["inode"], b["chunk"], length, True, pieces)

    def _rekey(self, b: dict) -> None:
        meta = self.metas.get(b["inode"])
        if meta is None:
            return
        meta.bucket = b["bucket"]
        meta.key = b["key"]
        meta.ext_len = 0
        self._touch_meta(meta, b.get("mtime"))

    def _clear_meta(self, b: dict) -> None:
        meta = self.metas.get(b["inode"])
        if meta is None:
            return
        if meta.deleted:
            del self.metas[meta.inode]
            self.dirs.pop(meta.inode, None)
            return
        meta.dirty = False
        meta.dirty_since = None
        if "key" in b:
            meta.ext_key = b["key"]
            meta.ext_bucket = meta.bucket
            meta.ext_etag = b.get("etag")
            meta.ext_len = b.get("size", meta.size) if not meta.is_dir else 0

    def _clear_chunk(self, b: dict) -> None:
        chunk = self.chunks.get((b["inode"], b["chunk"]))
        if chunk is None:
            return
        chunk.dirty = False
        if "key" in b:
            for p in chunk.pieces:
                if p.external:
                    p.bucket, p.key = b["bucket"], b["key"]

    def _drop_chunk(self, b: dict) -> None:
        self.chunks.pop((b["inode"], b["chunk"]), None)
        self.pending.pop((b["inode"], b["chunk"]), None)

    def stage(self, sid: str, inode: int, chunk: int, at: int, ref: SecondLevelRef) -> None:
        self.pending.setdefault((inode, chunk), {})[sid] = Piece(at, ref.length, ref)

    def has_staged(self, inode: int, chunk: int, sid: str) -> bool:
        return sid in self.pending.get((inode, chunk), {}) or sid in self.folded

    # -- reads ---------------------------------------------------------

    def read_piece(self, piece: Piece, fetch: Fetch | None) -> bytes:
        if piece.sl is not None:
            return self.log.read_second_level(piece.sl)
        if fetch is None:
            raise RuntimeError("external piece without a fetch function")
        data = fetch(piece.bucket, piece.key, piece.obj_off + piece.at, piece.length)
        return data.ljust(piece.length, b"\0")

    def chunk_bytes(self, chunk: Chunk, fetch: Fetch | None) -> bytes:
        buf = bytearray(chunk.length)
        for p in chunk.pieces:
            data = self.read_piece(p, fetch)
            end = min(p.at + p.length, chunk.length)
            if end > p.at:
                buf[p.at:end] = data[:end - p.at]
        return bytes(buf)

    def read_chunk(self, inode: int, chunk_off: int, at: int, n: int, ext: dict | None,
                   fetch: Fetch | None) -> bytes:
        """Bytes ``[at, at+n)`` of a chunk, zero-filled past its content."""
        chunk = self.chunks.get((inode, chunk_off))
        if chunk is not None:
            data = self.chunk_bytes(chunk, fetch)
        elif ext and ext["len"] > chunk_off:
            length = min(self.chunk_size, ext["len"] - chunk_off)
            data = fetch(ext["bucket"], ext["key"], chunk_off, length).ljust(length, b"\0")
        else:
            data = b""
        return data[at:at + n].ljust(n, b"\0")

    # -- inspection ----------------------------------------------------

    def dirty_metas(self) -> list[InodeMeta]:
        return [m for m in self.metas.values() if m.dirty]

    def snapshot(self) -> dict:
        return {
            "metas": {i: m.to_wire() for i, m in sorted(self.metas.items())},
            "dirs": {i: t.to_wire() for i, t in sorted(self.dirs.items())},
            "chunks": {f"{k[0]}/{k[1]}": c.to_wire() for k, c in sorted(self.chunks.items())},
            "pending": {f"{k[0]}/{k[1]}": sorted(v) for k, v in sorted(self.pending.items())},
        }


_APPLY: dict[Cmd, Callable[[NodeStore, dict], None]] = {
    Cmd.CREATE_INODE: NodeStore._create,
    Cmd.DIR_ENTRY_ADD: NodeStore._dir_add,
    Cmd.DIR_ENTRY_REMOVE: NodeStore._dir_remove,
    Cmd.SET_DELETED: NodeStore._set_deleted,
    Cmd.TRUNCATE: NodeStore._truncate,
    Cmd.UPDATE_META: NodeStore._update_meta,
    Cmd.FOLD_STAGED: NodeStore._fold,
    Cmd.LOCALIZE_CHUNK: NodeStore._localize,
    Cmd.REKEY_INODE: NodeStore._rekey,
    Cmd.CLEAR_DIRTY_META: NodeStore._clear_meta,
    Cmd.CLEAR_DIRTY_CHUNK: NodeStore._clear_chunk,
    Cmd.DROP_CHUNK: NodeStore._drop_chunk,
}
