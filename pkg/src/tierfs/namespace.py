"""Coordinator side of namespace and write operations.

Each ``op_*`` generator runs at the node that owns the operation's primary
inode, builds per-participant parts and drives them through one
transaction, retrying with a fresh txSeqNum when a participant votes no.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Callable, Generator

from .commands import Cmd
from .errors import (
    Aborted,
    CrossDevice,
    Exists,
    IsADirectory,
    NodeListStale,
    NotADirectory,
    NotEmpty,
    NotFound,
    PermissionDenied,
    TransientError,
    TypeConflict,
    UsageError,
)
from .ring import placement_key
from .simnet import Sleep
from .store import DIR, FILE, ROOT_INODE, InodeMeta, make_inode_id
from .txn import coordinate

if TYPE_CHECKING:
    from .node import CacheNode

TX_ATTEMPTS = 12


class Parts:
    """Accumulates per-node transaction parts."""

    def __init__(self, node: "CacheNode"):
        self.node = node
        self.parts: dict[str, dict] = {}

    def _part(self, owner: str, kind: str = "data") -> dict:
        return self.parts.setdefault(owner, {"ops": [], "locks": [], "checks": [], "kind": kind,
                                             "record": "chunk"})

    def meta(self, inode: int, op=None, checks=(), kind: str = "data") -> dict:
        owner = self.node.owner(placement_key(inode))
        part = self._part(owner, kind)
        part["record"] = "meta"
        self._lock(part, placement_key(inode))
        if op is not None:
            part["ops"].append(op)
        part["checks"].extend(checks)
        return part

    def chunk(self, inode: int, offset: int, op=None, kind: str = "data") -> dict:
        key = placement_key(inode, offset, self.node.chunk_size)
        part = self._part(self.node.owner(key), kind)
        if offset == 0:
            part["record"] = "meta"
        self._lock(part, key)
        if op is not None:
            part["ops"].append(op)
        return part

    @staticmethod
    def _lock(part: dict, key: str) -> None:
        if key not in part["locks"]:
            part["locks"].append(key)

    def build(self) -> dict[str, dict]:
        if self.node.id not in self.parts:
            # the coordinator always takes part so that its prepare record anchors recovery
            self.parts[self.node.id] = {"ops": [], "locks": [], "checks": [], "kind": "data",
                                        "record": "meta"}
        return self.parts


def op(cmd: Cmd, **body) -> list:
    return [int(cmd), body]


def check_name(name: str) -> None:
    if not name or name in (".", "..") or "/" in name:
        raise UsageError(f"invalid name {name!r}")


def child_key(parent: InodeMeta, name: str, kind: str) -> str:
    return parent.key + name + ("/" if kind == DIR else "")


class NamespaceOps:
    """Mixin for :class:`tierfs.node.CacheNode`."""

    # -- retry scaffold ------------------------------------------------

    def _attempts(self: "CacheNode", client: str, seq: int,
                  build: Callable[[], Generator]) -> Generator:
        """Run ``build`` -> (parts, result) and commit, retrying transient aborts."""
        attempt = 0
        while True:
            parts, result = yield from build()
            if parts is None:
                return result
            txid = self.txn.next_txid(client, seq)
            try:
                yield from coordinate(self, txid, parts)
                return result
            except TransientError as exc:
                cause = exc.cause if isinstance(exc, Aborted) else exc
                if isinstance(cause, NodeListStale) and not self.owns(self._primary_key):
                    raise cause
                attempt += 1
                if attempt >= TX_ATTEMPTS:
                    raise Aborted(cause) from None
                self.sim.note_retry((client, seq))
                self.txn.counters["retried"] += 1
                yield Sleep(self.sim.backoff(attempt))

    def _own_or_stale(self: "CacheNode", key: str) -> None:
        self._primary_key = key
        if not self.owns(key):
            raise NodeListStale(self.ring.to_wire() if self.ring else None)

    def _remote_meta(self: "CacheNode", inode: int, kind: str | None, bucket: str, key: str) -> Generator:
        owner = self.owner(placement_key(inode))
        wire = yield from self.rpc(owner, "GetMeta", {"inode": inode, "kind": kind, "bucket": bucket,
                                                      "key": key})
        return InodeMeta.from_wire(wire)

    def _remote_listing(self: "CacheNode", inode: int, bucket: str, key: str) -> Generator:
        owner = self.owner(placement_key(inode))
        out = yield from self.rpc(owner, "ReadDir", {"dir": inode, "bucket": bucket, "key": key})
        return InodeMeta.from_wire(out["meta"]), {n: (c, k) for n, c, k in out["entries"]}

    def _dir_entry(self: "CacheNode", parent: InodeMeta, name: str):
        if name in self.store.conflicts.get(parent.inode, ()):
            raise TypeConflict(f"{parent.key}{name}")
        return self.store.dirs[parent.inode].entries.get(name)

    def _drop_chunks(self: "CacheNode", parts: Parts, meta: InodeMeta, start: int = 0) -> None:
        cs = self.chunk_size
        for off in range(start - start % cs, max(meta.size, meta.ext_len), cs):
            if off >= start:
                parts.chunk(meta.inode, off, op(Cmd.DROP_CHUNK, inode=meta.inode, chunk=off))

    # -- create / mkdir ------------------------------------------------

    def op_create(self: "CacheNode", client: str, seq: int, a: dict) -> Generator:
        check_name(a["name"])

        def build():
            self._own_or_stale(placement_key(a["parent"]))
            parent = self.local_dir(a["parent"], a.get("bucket", ""), a.get("key", ""))
            if parent.inode == ROOT_INODE:
                raise PermissionDenied("buckets are fixed by configuration")
            entry = self._dir_entry(parent, a["name"])
            if entry is not None:
                if a.get("exclusive"):
                    raise Exists(a["name"])
                child, kind = entry
                if kind != a["kind"]:
                    raise (IsADirectory if kind == DIR else NotADirectory)(a["name"])
                return None, {"inode": child, "kind": kind, "created": False, "bucket": parent.bucket,
                              "key": child_key(parent, a["name"], kind)}
            self.store.max_counter += 1
            inode = make_inode_id(self.store.ordinal, self.store.max_counter)
            now = a.get("mtime", self.sim.now)
            meta = InodeMeta(inode, a["kind"], mode=a.get("mode", 0o755 if a["kind"] == DIR else 0o644),
                             mtime=now, dirty=True, dirty_since=now, bucket=parent.bucket,
                             key=child_key(parent, a["name"], a["kind"]), version=1)
            parts = Parts(self)
            parts.meta(parent.inode, op(Cmd.DIR_ENTRY_ADD, dir=parent.inode,
                                        entries=[[a["name"], inode, a["kind"]]], mtime=now),
                       [["meta_live", parent.inode], ["entry_absent", parent.inode, a["name"]]])
            parts.meta(inode, op(Cmd.CREATE_INODE, meta=meta.to_wire()), [["meta_absent", inode]])
            return parts.build(), {"inode": inode, "kind": a["kind"], "created": True,
                                   "bucket": meta.bucket, "key": meta.key}
            yield  # pragma: no cover

        return (yield from self._attempts(client, seq, build))

    # -- flush (write) -------------------------------------------------

    def op_flush(self: "CacheNode", client: str, seq: int, a: dict) -> Generator:
        """Fold staged writes into chunks and extend the file size, atomically."""

        def build():
            inode = a["inode"]
            self._own_or_stale(placement_key(inode))
            meta = self.local_meta(inode, FILE, a.get("bucket", ""), a.get("key", ""))
            if meta.deleted:
                raise NotFound(f"inode {inode}")
            if meta.is_dir:
                raise IsADirectory(f"inode {inode}")
            now = a.get("mtime", self.sim.now)
            parts = Parts(self)
            parts.meta(inode, op(Cmd.UPDATE_META, inode=inode, size_at_least=a["end"], mtime=now),
                       [["meta_live", inode]])
            ext = meta.ext_binding()
            for chunk, sids in a["writes"]:
                body = {"inode": inode, "chunk": chunk, "sids": sids}
                if ext is not None:
                    body["ext"] = {k: ext[k] for k in ("bucket", "key", "len")}
                parts.chunk(inode, chunk, [int(Cmd.FOLD_STAGED), body])
            return parts.build(), {"size": max(meta.size, a["end"])}
            yield  # pragma: no cover

        return (yield from self._attempts(client, seq, build))

    # -- unlink / rmdir ------------------------------------------------

    def op_unlink(self: "CacheNode", client: str, seq: int, a: dict) -> Generator:
        def build():
            self._own_or_stale(placement_key(a["parent"]))
            parent = self.local_dir(a["parent"], a.get("bucket", ""), a.get("key", ""))
            entry = self._dir_entry(parent, a["name"])
            if entry is None:
                raise NotFound(f"{parent.key}{a['name']}")
            child, kind = entry
            if a.get("dir") and kind != DIR:
                raise NotADirectory(a["name"])
            if not a.get("dir") and kind == DIR:
                raise IsADirectory(a["name"])
            key = child_key(parent, a["name"], kind)
            if kind == DIR:
                cmeta, rows = yield from self._remote_listing(child, parent.bucket, key)
                if rows:
                    raise NotEmpty(a["name"])
            else:
                cmeta = yield from self._remote_meta(child, kind, parent.bucket, key)
            now = a.get("mtime", self.sim.now)
            parts = Parts(self)
            parts.meta(parent.inode, op(Cmd.DIR_ENTRY_REMOVE, dir=parent.inode, name=a["name"], mtime=now),
                       [["entry_is", parent.inode, a["name"], child]])
            checks = [["version", child, cmeta.version]]
            if kind == DIR:
                checks.append(["dir_empty", child])
            parts.meta(child, op(Cmd.SET_DELETED, inode=child, mtime=now), checks)
            if kind == FILE:
                self._drop_chunks(parts, cmeta)
            return parts.build(), {"inode": child}

        return (yield from self._attempts(client, seq, build))

    # -- truncate ------------------------------------------------------

    def op_truncate(self: "CacheNode", client: str, seq: int, a: dict) -> Generator:
        def build():
            inode, size = a["inode"], a["size"]
            if size < 0:
                raise UsageError("negative size")
            self._own_or_stale(placement_key(inode))
            meta = self.local_meta(inode, FILE, a.get("bucket", ""), a.get("key", ""))
            if meta.deleted:
                raise NotFound(f"inode {inode}")
            if meta.is_dir:
                raise IsADirectory(f"inode {inode}")
            now = a.get("mtime", self.sim.now)
            parts = Parts(self)
            parts.meta(inode, op(Cmd.TRUNCATE, inode=inode, size=size, mtime=now), [["meta_live", inode]])
            cs = self.chunk_size
            if size % cs:
                boundary = size - size % cs
                if boundary < max(meta.size, meta.ext_len):
                    parts.chunk(inode, boundary, op(Cmd.TRUNCATE, inode=inode, chunk=boundary,
                                                    length=size - boundary))
                self._drop_chunks(parts, meta, boundary + cs)
            else:
                self._drop_chunks(parts, meta, size)
            return parts.build(), {"size": size}
            yield  # pragma: no cover

        return (yield from self._attempts(client, seq, build))

    # -- rename --------------------------------------------------------

    def op_rename(self: "CacheNode", client: str, seq: int, a: dict) -> Generator:
        check_name(a["dname"])

        def build():
            self._own_or_stale(placement_key(a["sparent"]))
            src = self.local_dir(a["sparent"], a.get("sbucket", ""), a.get("skey", ""))
            entry = self._dir_entry(src, a["sname"])
            if entry is None:
                raise NotFound(f"{src.key}{a['sname']}")
            child, kind = entry
            if src.inode == ROOT_INODE:
                raise PermissionDenied("buckets cannot be renamed")
            if a["dparent"] == src.inode:
                dst, rows = src, dict(self.store.dirs[src.inode].entries)
            else:
                dst, rows = yield from self._remote_listing(a["dparent"], a.get("dbucket", ""), a.get("dkey", ""))
            if dst.deleted:
                raise NotFound("destination directory")
            if dst.inode == ROOT_INODE:
                raise PermissionDenied("cannot create buckets")
            if dst.inode == src.inode and a["dname"] == a["sname"]:
                return None, {"inode": child}
            old_key = child_key(src, a["sname"], kind)
            new_key = child_key(dst, a["dname"], kind)
            moved = yield from self._remote_meta(child, kind, src.bucket, old_key)
            target = rows.get(a["dname"])
            tmeta = None
            if target is not None:
                if target[0] == child:
                    return None, {"inode": child}
                tkey = child_key(dst, a["dname"], target[1])
                if kind == DIR:
                    if target[1] != DIR:
                        raise NotADirectory(a["dname"])
                    tmeta, trows = yield from self._remote_listing(target[0], dst.bucket, tkey)
                    if trows:
                        raise NotEmpty(a["dname"])
                else:
                    if target[1] == DIR:
                        raise IsADirectory(a["dname"])
                    tmeta = yield from self._remote_meta(target[0], FILE, dst.bucket, tkey)
            now = a.get("mtime", self.sim.now)
            parts = Parts(self)
            parts.meta(src.inode, op(Cmd.DIR_ENTRY_REMOVE, dir=src.inode, name=a["sname"], mtime=now),
                       [["entry_is", src.inode, a["sname"], child]])
            dcheck = (["entry_is", dst.inode, a["dname"], target[0]] if target is not None
                      else ["entry_absent", dst.inode, a["dname"]])
            parts.meta(dst.inode, op(Cmd.DIR_ENTRY_ADD, dir=dst.inode, entries=[[a["dname"], child, kind]],
                                     mtime=now), [dcheck])
            if kind == DIR:
                if dst.bucket == src.bucket and new_key.startswith(old_key):
                    raise UsageError("cannot move a directory into itself")
                subtree = yield from self._collect_subtree(moved)
                if any(m.ext_key is not None for m in subtree):
                    raise CrossDevice(f"{old_key} has objects in the external store")
                for m in subtree:
                    parts.meta(m.inode, op(Cmd.REKEY_INODE, inode=m.inode, bucket=dst.bucket,
                                           key=new_key + m.key[len(old_key):], mtime=now),
                               [["version", m.inode, m.version]])
            else:
                parts.meta(child, op(Cmd.REKEY_INODE, inode=child, bucket=dst.bucket, key=new_key, mtime=now),
                           [["version", child, moved.version]])
                ext = moved.ext_binding()
                if ext is not None:
                    cs = self.chunk_size
                    for off in range(0, moved.size, cs):
                        part = parts.chunk(child, off, op(Cmd.LOCALIZE_CHUNK, inode=child, chunk=off,
                                                          length=min(cs, moved.size - off)))
                        part["action"] = "localize"
                        part.setdefault("extra", {})["ext"] = ext
            if tmeta is not None:
                checks = [["version", tmeta.inode, tmeta.version]]
                if tmeta.is_dir:
                    checks.append(["dir_empty", tmeta.inode])
                parts.meta(tmeta.inode, op(Cmd.SET_DELETED, inode=tmeta.inode, mtime=now), checks)
                if not tmeta.is_dir:
                    self._drop_chunks(parts, tmeta)
            return parts.build(), {"inode": child}

        return (yield from self._attempts(client, seq, build))

    def _collect_subtree(self: "CacheNode", root: InodeMeta) -> Generator:
        out, queue = [], [root]
        while queue:
            meta = queue.pop(0)
            out.append(meta)
            if meta.ext_key is not None:
                break
            if not meta.is_dir:
                continue
            _, rows = yield from self._remote_listing(meta.inode, meta.bucket, meta.key)
            for name in sorted(rows):
                child, kind = rows[name]
                cmeta = yield from self._remote_meta(child, kind, meta.bucket, child_key(meta, name, kind))
                queue.append(cmeta)
        return out
