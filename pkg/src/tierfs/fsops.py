"""Client-side filesystem operations.

A :class:`ClientSession` is one sequential client. Every method is a
generator to be run inside the simulator (``cluster.run(session, gen)``).
Strict sessions stage and flush each write before acknowledging it; weak
sessions buffer writes per handle and flush them as one transaction when a
contiguous run reaches the buffer threshold, or at ``close``/``fsync``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Generator

from .errors import (
    Aborted,
    BadHandle,
    Conflict,
    ExternalError,
    FsError,
    IsADirectory,
    Locked,
    NodeListStale,
    NotADirectory,
    NotFound,
    PermissionDenied,
    ReadOnly,
    RpcTimeout,
    TransientError,
    UsageError,
)
from .ring import Ring, placement_key
from .simnet import Call, Gather, Sim, Sleep
from .store import DIR, FILE, ROOT_INODE, InodeMeta, split_range

WEAK_BUFFER_LIMIT = 128 * 1024
CALL_RETRIES = 40
TX_RETRIES = 40
TX_TIMEOUT = 4000

RETRYABLE = (RpcTimeout, Locked, ReadOnly, ExternalError, Conflict)


@dataclass
class FileHandle:
    fd: int
    inode: int
    kind: str
    bucket: str
    key: str
    mode: str
    session: "ClientSession"
    closed: bool = False
    buffer: list[tuple[int, bytes]] = field(default_factory=list)

    @property
    def writable(self) -> bool:
        return "w" in self.mode or "a" in self.mode or "+" in self.mode

    @property
    def readable(self) -> bool:
        return "r" in self.mode or "+" in self.mode

    def check_open(self) -> None:
        if self.closed:
            raise BadHandle(f"handle {self.fd} is closed")


def split_path(path: str) -> list[str]:
    if not path.startswith("/"):
        raise UsageError(f"path must be absolute: {path!r}")
    parts = [p for p in path.split("/") if p]
    if any(p in (".", "..") for p in parts):
        raise UsageError(f"path may not contain . or ..: {path!r}")
    return parts


def parent_and_name(path: str) -> tuple[str, str]:
    parts = split_path(path)
    if not parts:
        raise UsageError("the root has no parent")
    return "/" + "/".join(parts[:-1]), parts[-1]


class ClientSession:
    def __init__(self, sim: Sim, client_id: str, mode: str = "strict",
                 contacts: Callable[[], list[str]] | None = None, chunk_size: int = 64 * 1024):
        if mode not in ("strict", "weak"):
            raise UsageError(f"unknown consistency mode {mode}")
        self.sim = sim
        self.id = client_id
        self.mode = mode
        self.contacts = contacts or (lambda: [])
        self.chunk_size = chunk_size
        self.call_retries = CALL_RETRIES
        self.tx_retries = TX_RETRIES
        self.seq = 0
        self.ring: Ring | None = None
        self._fds = itertools.count(3)
        self.handles: dict[int, FileHandle] = {}
        self.stats = {"flush_tx": 0, "flushed_writes": 0, "staged": 0, "writes": 0, "refreshes": 0,
                      "retries": 0}

    def next_seq(self) -> int:
        self.seq += 1
        return self.seq

    # -- transport -----------------------------------------------------

    def refresh(self, hint: dict | None = None) -> Generator:
        """Adopt a newer node list, from ``hint`` or by asking the cluster."""
        self.stats["refreshes"] += 1
        current = self.ring.version if self.ring else 0
        if hint is not None and hint["version"] > current:
            self.ring = Ring.from_wire(hint)
            return
        for node in self.contacts() or (self.ring.nodes if self.ring else []):
            try:
                wire = yield Call(node, "GetNodeList", {})
            except TransientError:
                continue
            if wire is not None and wire["version"] >= current:
                self.ring = Ring.from_wire(wire)
                if wire["version"] > current or hint is None:
                    return
        # nobody is ahead of us yet: a membership change is probably committing
        yield Sleep(self.sim.backoff(2))

    def call(self, key: str, kind: str, body: dict, timeout: int | None = None) -> Generator:
        """Send ``kind`` to the owner of placement key ``key``, following ring changes."""
        attempt = 0
        while True:
            if self.ring is None:
                yield from self.refresh()
                if self.ring is None:
                    raise NodeListStale(None)
            to = self.ring.owner(key)
            try:
                return (yield Call(to, kind, dict(body, v=self.ring.version), timeout))
            except NodeListStale as exc:
                yield from self.refresh(exc.node_list)
                err = exc
            except RETRYABLE as exc:
                err = exc
                if isinstance(exc, RpcTimeout):
                    yield from self.refresh()
            attempt += 1
            self.stats["retries"] += 1
            if attempt > self.call_retries:
                raise err
            self.sim.note_retry((self.id, kind, key, self.seq))
            yield Sleep(self.sim.backoff(attempt))

    def tx(self, key: str, op: str, args: dict) -> Generator:
        """Run a coordinated operation; aborted attempts retry under a new sequence number."""
        attempt = 0
        while True:
            seq = self.next_seq()
            body = {"client": self.id, "seq": seq, "op": op, "args": args}
            try:
                return (yield from self.call(key, "TxRequest", body, TX_TIMEOUT))
            except Aborted as exc:
                err = exc
                if isinstance(exc.cause, FsError) and exc.cause.persistent:
                    raise exc.cause from None
            attempt += 1
            if attempt > self.tx_retries:
                raise err
            self.sim.note_retry((self.id, op, seq))
            yield Sleep(self.sim.backoff(attempt))

    # -- lookup --------------------------------------------------------

    def lookup(self, path: str) -> Generator:
        """Resolve ``path`` to ``{inode, kind, bucket, key}``."""
        cur = {"inode": ROOT_INODE, "kind": DIR, "bucket": "", "key": ""}
        for name in split_path(path):
            if cur["kind"] != DIR:
                raise NotADirectory(path)
            cur = yield from self.call(placement_key(cur["inode"]), "Lookup",
                                       {"dir": cur["inode"], "bucket": cur["bucket"], "key": cur["key"],
                                        "name": name})
        return cur

    def stat(self, path: str) -> Generator:
        info = yield from self.lookup(path)
        meta = yield from self._meta(info)
        return meta

    def _meta(self, info: dict) -> Generator:
        wire = yield from self.call(placement_key(info["inode"]), "GetMeta",
                                    {"inode": info["inode"], "kind": info["kind"], "bucket": info["bucket"],
                                     "key": info["key"]})
        meta = InodeMeta.from_wire(wire)
        if meta.deleted:
            raise NotFound(f"inode {info['inode']}")
        return meta

    # -- open / close --------------------------------------------------

    def open(self, path: str, mode: str = "r", create: bool = False, exclusive: bool = False,
             truncate: bool = False) -> Generator:
        try:
            info = yield from self.lookup(path)
        except NotFound:
            if not create:
                raise
            info = yield from self._create(path, FILE, exclusive)
        else:
            if create and exclusive:
                from .errors import Exists

                raise Exists(path)
        if info["kind"] == DIR and mode != "r":
            raise IsADirectory(path)
        fh = FileHandle(next(self._fds), info["inode"], info["kind"], info["bucket"], info["key"], mode, self)
        self.handles[fh.fd] = fh
        if truncate and fh.writable:
            yield from self._truncate(fh, 0)
        return fh

    def _create(self, path: str, kind: str, exclusive: bool) -> Generator:
        parent_path, name = parent_and_name(path)
        parent = yield from self.lookup(parent_path)
        if parent["kind"] != DIR:
            raise NotADirectory(parent_path)
        if parent["inode"] == ROOT_INODE:
            raise PermissionDenied("buckets are fixed by configuration")
        out = yield from self.tx(placement_key(parent["inode"]), "create",
                                 {"parent": parent["inode"], "bucket": parent["bucket"], "key": parent["key"],
                                  "name": name, "kind": kind, "exclusive": exclusive, "mtime": self.sim.now})
        return {k: out[k] for k in ("inode", "kind", "bucket", "key")}

    def close(self, fh: FileHandle) -> Generator:
        if fh is None or self.handles.get(fh.fd) is not fh:
            raise BadHandle("handle is not open")
        fh.check_open()
        yield from self.drain(fh)
        fh.closed = True
        del self.handles[fh.fd]

    # -- writes --------------------------------------------------------

    def write(self, fh: FileHandle, offset: int, data: bytes) -> Generator:
        fh.check_open()
        if not fh.writable:
            raise BadHandle("handle not open for writing")
        if offset < 0:
            raise UsageError("negative offset")
        self.stats["writes"] += 1
        if not data:
            return 0
        if self.mode == "strict":
            yield from self._flush_writes(fh, [(offset, bytes(data))])
        else:
            fh.buffer.append((offset, bytes(data)))
            if longest_run(fh.buffer) >= WEAK_BUFFER_LIMIT:
                yield from self.drain(fh)
        return len(data)

    def drain(self, fh: FileHandle) -> Generator:
        """Flush a weak-mode buffer as one transaction; the buffer survives a failure."""
        if not fh.buffer:
            return
        writes = list(fh.buffer)
        yield from self._flush_writes(fh, writes)
        fh.buffer = fh.buffer[len(writes):]

    def _flush_writes(self, fh: FileHandle, writes: list[tuple[int, bytes]]) -> Generator:
        cs = self.chunk_size
        wseq = self.next_seq()
        frags: list[tuple[int, dict]] = []
        order: dict[int, list[str]] = {}
        n = 0
        for offset, data in writes:
            pos = 0
            for chunk, intra, length in split_range(offset, len(data), cs):
                sid = f"{self.id}:{wseq}:{n}"
                n += 1
                frags.append((chunk, {"sid": sid, "inode": fh.inode, "chunk": chunk, "at": intra,
                                      "data": data[pos:pos + length]}))
                order.setdefault(chunk, []).append(sid)
                pos += length
        yield from self._stage_all(fh, frags)
        end = max(off + len(d) for off, d in writes)
        yield from self.tx(placement_key(fh.inode), "flush",
                           {"inode": fh.inode, "bucket": fh.bucket, "key": fh.key,
                            "writes": [[c, sids] for c, sids in sorted(order.items())], "end": end,
                            "mtime": self.sim.now})
        self.stats["flush_tx"] += 1
        self.stats["flushed_writes"] += len(writes)

    def _stage_all(self, fh: FileHandle, frags: list[tuple[int, dict]]) -> Generator:
        if self.ring is None:
            yield from self.refresh()
        keys = [placement_key(fh.inode, c, self.chunk_size) for c, _ in frags]
        version = self.ring.version
        results = yield Gather([Call(self.ring.owner(k), "StageWrite", dict(b, v=version))
                                for k, (_, b) in zip(keys, frags)])
        for key, (_, body), res in zip(keys, frags, results):
            if isinstance(res, BaseException):
                if isinstance(res, FsError) and res.persistent:
                    raise res
                yield from self.call(key, "StageWrite", body)
            self.stats["staged"] += 1

    # -- reads ---------------------------------------------------------

    def read(self, fh: FileHandle, offset: int, n: int) -> Generator:
        fh.check_open()
        if offset < 0 or n < 0:
            raise UsageError("negative offset or length")
        if fh.kind == DIR:
            raise IsADirectory(fh.key)
        meta = yield from self._meta({"inode": fh.inode, "kind": fh.kind, "bucket": fh.bucket, "key": fh.key})
        size = meta.size
        for off, data in fh.buffer:
            size = max(size, off + len(data))
        n = max(0, min(n, size - offset))
        if n == 0:
            return b""
        buf = bytearray(n)
        limit = min(offset + n, meta.size)
        if limit > offset:
            ranges = split_range(offset, limit - offset, self.chunk_size)
            ext = meta.ext_binding()
            version = self.ring.version
            keys = [placement_key(fh.inode, c, self.chunk_size) for c, _, _ in ranges]
            bodies = [{"inode": fh.inode, "chunk": c, "at": at, "n": ln, "ext": ext} for c, at, ln in ranges]
            results = yield Gather([Call(self.ring.owner(k), "ReadChunk", dict(b, v=version))
                                    for k, b in zip(keys, bodies)])
            for key, body, res in zip(keys, bodies, results):
                if isinstance(res, BaseException):
                    if isinstance(res, FsError) and res.persistent:
                        raise res
                    res = yield from self.call(key, "ReadChunk", body)
                start = body["chunk"] + body["at"] - offset
                buf[start:start + len(res)] = res
        for off, data in fh.buffer:
            lo, hi = max(off, offset), min(off + len(data), offset + n)
            if lo < hi:
                buf[lo - offset:hi - offset] = data[lo - off:hi - off]
        return bytes(buf)

    def read_path(self, path: str) -> Generator:
        fh = yield from self.open(path, "r")
        meta = yield from self._meta({"inode": fh.inode, "kind": fh.kind, "bucket": fh.bucket, "key": fh.key})
        data = yield from self.read(fh, 0, meta.size)
        yield from self.close(fh)
        return data

    def write_path(self, path: str, data: bytes, offset: int = 0) -> Generator:
        fh = yield from self.open(path, "w", create=True)
        yield from self.write(fh, offset, data)
        yield from self.close(fh)
        return len(data)

    # -- persistence ---------------------------------------------------

    def fsync(self, fh: FileHandle) -> Generator:
        fh.check_open()
        yield from self.drain(fh)
        out = yield from self.tx(placement_key(fh.inode), "persist", {"inode": fh.inode})
        return out

    # -- namespace -----------------------------------------------------

    def mkdir(self, path: str) -> Generator:
        info = yield from self._create(path, DIR, exclusive=True)
        return info

    def readdir(self, path: str) -> Generator:
        info = yield from self.lookup(path)
        if info["kind"] != DIR:
            raise NotADirectory(path)
        out = yield from self.call(placement_key(info["inode"]), "ReadDir",
                                   {"dir": info["inode"], "bucket": info["bucket"], "key": info["key"]})
        return sorted(name for name, _, _ in out["entries"])

    def _remove(self, path: str, is_dir: bool) -> Generator:
        parent_path, name = parent_and_name(path)
        parent = yield from self.lookup(parent_path)
        if parent["kind"] != DIR:
            raise NotADirectory(parent_path)
        if parent["inode"] == ROOT_INODE:
            raise PermissionDenied("buckets cannot be removed")
        out = yield from self.tx(placement_key(parent["inode"]), "unlink",
                                 {"parent": parent["inode"], "bucket": parent["bucket"], "key": parent["key"],
                                  "name": name, "dir": is_dir, "mtime": self.sim.now})
        return out

    def unlink(self, path: str) -> Generator:
        return (yield from self._remove(path, False))

    def rmdir(self, path: str) -> Generator:
        return (yield from self._remove(path, True))

    def rename(self, src: str, dst: str) -> Generator:
        sp, sname = parent_and_name(src)
        dp, dname = parent_and_name(dst)
        sparent = yield from self.lookup(sp)
        dparent = yield from self.lookup(dp)
        for p, info in ((sp, sparent), (dp, dparent)):
            if info["kind"] != DIR:
                raise NotADirectory(p)
        if ROOT_INODE in (sparent["inode"], dparent["inode"]):
            raise PermissionDenied("buckets cannot be renamed")
        out = yield from self.tx(placement_key(sparent["inode"]), "rename",
                                 {"sparent": sparent["inode"], "sbucket": sparent["bucket"], "skey": sparent["key"],
                                  "sname": sname, "dparent": dparent["inode"], "dbucket": dparent["bucket"],
                                  "dkey": dparent["key"], "dname": dname, "mtime": self.sim.now})
        return out

    def _truncate(self, fh: FileHandle, size: int) -> Generator:
        out = yield from self.tx(placement_key(fh.inode), "truncate",
                                 {"inode": fh.inode, "bucket": fh.bucket, "key": fh.key, "size": size,
                                  "mtime": self.sim.now})
        return out

    def ftruncate(self, fh: FileHandle, size: int) -> Generator:
        fh.check_open()
        yield from self.drain(fh)
        return (yield from self._truncate(fh, size))

    def truncate_path(self, path: str, size: int) -> Generator:
        info = yield from self.lookup(path)
        if info["kind"] == DIR:
            raise IsADirectory(path)
        fh = FileHandle(-1, info["inode"], info["kind"], info["bucket"], info["key"], "w", self)
        return (yield from self._truncate(fh, size))


def longest_run(buffer: list[tuple[int, bytes]]) -> int:
    """Length of the longest contiguous byte run covered by buffered writes."""
    spans = sorted((off, off + len(d)) for off, d in buffer)
    best = cur_len = 0
    cur_start = cur_end = None
    for lo, hi in spans:
        if cur_end is None or lo > cur_end:
            cur_start, cur_end = lo, hi
        else:
            cur_end = max(cur_end, hi)
        cur_len = cur_end - cur_start
        best = max(best, cur_len)
    return best
