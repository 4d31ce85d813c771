"""A cache node: log replay, participant handlers, reads, staging and materialization.

Coordinator-side filesystem operations live in :mod:`tierfs.namespace`,
persistence in :mod:`tierfs.persist` and membership in
:mod:`tierfs.membership`; they are mixed into :class:`CacheNode`.
"""

from __future__ import annotations

import logging
from collections import OrderedDict
from pathlib import Path
from typing import Any, Generator

from .commands import Cmd
from .errors import (
    ExternalError,
    FsError,
    Locked,
    NodeCrash,
    NodeListStale,
    NotADirectory,
    NotFound,
    ProtocolError,
    ReadOnly,
    RpcTimeout,
    TypeConflict,
    UsageError,
)
from .extstore import ObjectStore
from .membership import MembershipOps
from .namespace import NamespaceOps
from .persist import PersistOps
from .raftlog import RaftLog, SecondLevelRef
from .ring import Ring, placement_key
from .simnet import Call, Join, Message, Sim, Sleep
from .store import DIR, FILE, ROOT_INODE, InodeMeta, NodeStore, make_inode_id
from .txn import TxId, TxnManager, TxRecord, resume_incomplete, run_coordinated, vote_no, vote_yes

logger = logging.getLogger(__name__)

FETCH_CACHE_ENTRIES = 4096
RPC_RETRIES = 8


class CacheNode(NamespaceOps, PersistOps, MembershipOps):
    def __init__(self, node_id: str, node_dir: str | Path, sim: Sim, ext: ObjectStore, buckets,
                 chunk_size: int, flush_interval: int | None = None, fsync: bool = False):
        self.id = node_id
        self.dir = Path(node_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.sim = sim
        self.ext = ext
        self.buckets = sorted(buckets)
        self.chunk_size = chunk_size
        self.flush_interval = flush_interval
        self.fsync = fsync
        self.log: RaftLog | None = None
        self._boot()

    # -- lifecycle -----------------------------------------------------

    def _boot(self) -> None:
        self.log = RaftLog(self.dir, fsync=self.fsync,
                           on_durable=lambda phase, label: self.sim.durable_point(self.id, phase, label))
        self.store = NodeStore(self.chunk_size, self.log)
        self.txn = TxnManager(self)
        self.ring: Ring | None = None
        self.frozen = False
        self.leaving = False
        self.left = False
        self.membership_busy = False
        self.persisting: set[int] = set()
        self.fetch_cache: OrderedDict = OrderedDict()
        self.migrated_in = {"entities": 0, "bytes": 0}
        self.internal_seq = 0
        self.incarnation = self._bump_incarnation()
        self.log.replay(self._replay_entry)
        if any(r.kind == "membership" for r in self.txn.incomplete()):
            self.frozen = True

    def _bump_incarnation(self) -> int:
        path = self.dir / "incarnation"
        n = int(path.read_text()) + 1 if path.exists() else 1
        path.write_text(str(n))
        return n

    def start(self) -> None:
        """Resume incomplete transactions and start periodic work."""
        resume_incomplete(self)
        if self.flush_interval:
            self.sim.every(self.id, max(1, self.flush_interval // 5), self._flush_tick)

    def on_crash(self) -> None:
        self.log.close()

    def on_restart(self) -> None:
        self._boot()
        self.start()

    def shutdown(self) -> None:
        self.log.close()

    def spawn(self, gen: Generator, name: str = ""):
        return self.sim.spawn(self.id, gen, name)

    @property
    def client_id(self) -> str:
        return f"node:{self.id}:{self.incarnation}"

    def next_internal_seq(self) -> int:
        self.internal_seq += 1
        return self.internal_seq

    # -- replay and apply ----------------------------------------------

    def _replay_entry(self, index: int, entry) -> None:
        cmd = entry.command()
        body = entry.body()
        if cmd is Cmd.STAGE_WRITE:
            self.store.stage(body["sid"], body["inode"], body["chunk"], body["at"],
                             SecondLevelRef.from_wire(body["ref"]))
        elif cmd in (Cmd.CREATE_INODE, Cmd.DIR_ENTRY_ADD):
            self.store.apply(cmd, body)
        elif cmd is Cmd.NODE_LIST_UPDATE:
            self._apply_ring(body, None)
        else:
            self.txn.replay(cmd, body)

    def apply_ops(self, ops: list, rec: TxRecord | None) -> None:
        for cmd, body in ops:
            if Cmd(cmd) is Cmd.NODE_LIST_UPDATE:
                self._apply_ring(body, rec)
            else:
                self.store.apply(cmd, body)

    def on_abort(self, rec: TxRecord) -> None:
        if rec.kind == "membership":
            self.frozen = False

    def _apply_ring(self, body: dict, rec: TxRecord | None) -> None:
        new = Ring.from_wire(body["ring"])
        joined = self.id in new and (self.ring is None or self.id not in self.ring)
        if joined:
            self.store.ordinal = new.version
            self.store.max_counter = 0
        if rec is not None:
            for received in self.txn.staged_migrations.pop(rec.txid.key, []):
                self._install_migration(received)
        self.ring = new
        self.frozen = False
        self.fetch_cache.clear()
        if self.id not in new:
            self.left = True
        self._drop_unowned()

    def _drop_unowned(self) -> None:
        if self.ring is None:
            return
        mine = self.owns
        for inode in [i for i in self.store.metas if not mine(placement_key(i))]:
            del self.store.metas[inode]
            self.store.dirs.pop(inode, None)
            self.store.conflicts.pop(inode, None)
        for key in [k for k in self.store.chunks if not mine(placement_key(k[0], k[1]))]:
            del self.store.chunks[key]
        for key in [k for k in self.store.pending if not mine(placement_key(k[0], k[1]))]:
            del self.store.pending[key]

    def owns(self, key: str) -> bool:
        return self.ring is not None and len(self.ring) > 0 and self.ring.owner(key) == self.id

    def owner(self, key: str) -> str:
        return self.ring.owner(key)

    def chunk_owner(self, inode: int, offset: int) -> str:
        return self.ring.owner(placement_key(inode, offset, self.chunk_size))

    def bootstrap(self) -> None:
        """Become the only member of a fresh cluster (ring version 1)."""
        ring = Ring.from_nodes([self.id], version=1)
        self.log.append_command(Cmd.NODE_LIST_UPDATE, {"ring": ring.to_wire()})
        self._apply_ring({"ring": ring.to_wire()}, None)

    # -- message dispatch ----------------------------------------------

    def handle(self, src: str, msg: Message) -> Any:
        handler = getattr(self, "_h_" + msg.kind, None)
        if handler is None:
            raise ProtocolError(f"unknown message {msg.kind}")
        return handler(src, msg.body)

    def check_version(self, body: dict) -> None:
        v = body.get("v")
        if v is None:
            return
        from .cluster import validate_version

        validate_version(v, self.ring)

    def _h_GetNodeList(self, src, b):
        return self.ring.to_wire() if self.ring is not None else None

    # -- local rpc helper ----------------------------------------------

    def rpc(self, to: str, kind: str, body: dict, retries: int = RPC_RETRIES,
            retry_on=(RpcTimeout, Locked), timeout: int | None = None) -> Generator:
        """Call ``kind`` on ``to`` (directly when it is this node), retrying transient errors."""
        body = dict(body, v=self.ring.version)
        attempt = 0
        while True:
            try:
                if to == self.id:
                    out = self.handle(self.id, Message(kind, body))
                    if isinstance(out, Generator):
                        out = yield from out
                    return out
                return (yield Call(to, kind, body, timeout))
            except retry_on:
                attempt += 1
                if attempt > retries:
                    raise
                self.sim.note_retry((self.id, kind, repr(sorted(body.items()))))
                yield Sleep(self.sim.backoff(attempt))

    # -- object store access -------------------------------------------

    def fetcher(self, etag: str | None):
        def fetch(bucket: str, key: str, off: int, n: int) -> bytes:
            ck = (bucket, key, off, n, etag)
            data = self.fetch_cache.get(ck)
            if data is None:
                data = self.ext.get_range(bucket, key, off, n)
                self.fetch_cache[ck] = data
                if len(self.fetch_cache) > FETCH_CACHE_ENTRIES:
                    self.fetch_cache.popitem(last=False)
            return data

        return fetch

    def read_local_chunk(self, inode: int, chunk: int, at: int, n: int, ext: dict | None) -> bytes:
        return self.store.read_chunk(inode, chunk, at, n, ext, self.fetcher(ext.get("etag") if ext else None))

    def abort_upload(self, upload: str) -> None:
        try:
            self.ext.mpu_abort(upload)
        except (NotFound, ExternalError):
            pass

    # -- materialization -----------------------------------------------

    def data_locked(self, resource: str) -> bool:
        holder = self.txn.locks.held(resource)
        if holder is None:
            return False
        rec = self.txn.records.get(holder)
        return rec is None or rec.kind == "data"

    def local_meta(self, inode: int, kind: str | None = None, bucket: str = "", key: str = "",
                   materialize: bool = True) -> InodeMeta:
        meta = self.store.metas.get(inode)
        if meta is not None:
            return meta
        if not materialize:
            raise NotFound(f"inode {inode}")
        return self._materialize(inode, kind, bucket, key)

    def _materialize(self, inode: int, kind: str | None, bucket: str, key: str) -> InodeMeta:
        if inode == ROOT_INODE:
            meta = InodeMeta(ROOT_INODE, DIR, mode=0o755, listed=False)
        elif 2 <= inode < 2 + len(self.buckets):
            meta = InodeMeta(inode, DIR, mode=0o755, bucket=self.buckets[inode - 2], key="", ext_key="",
                             ext_bucket=self.buckets[inode - 2],
                             listed=False)
        elif kind == DIR:
            meta = InodeMeta(inode, DIR, mode=0o755, bucket=bucket, key=key, ext_key=key,
                             ext_bucket=bucket, listed=False)
        elif kind == FILE:
            size, etag = self.ext.head_object(bucket, key)
            meta = InodeMeta(inode, FILE, size=size, bucket=bucket, key=key, ext_key=key, ext_bucket=bucket,
                             ext_etag=etag, ext_len=size)
        else:
            raise NotFound(f"inode {inode} has no cached metadata")
        self.log.append_command(Cmd.CREATE_INODE, {"meta": meta.to_wire()})
        self.store.apply(Cmd.CREATE_INODE, {"meta": meta.to_wire()})
        return meta

    def ensure_listed(self, meta: InodeMeta) -> None:
        if meta.listed:
            return
        table = self.store.dirs.get(meta.inode)
        known = set(table.entries) if table else set()
        entries, conflicts = [], []
        if meta.inode == ROOT_INODE:
            names = [(b, DIR) for b in self.buckets]
        else:
            keys, prefixes = self.ext.list_prefix(meta.bucket, meta.key, "/")
            files = {k[len(meta.key):] for k in keys if k != meta.key}
            dirs = {p[len(meta.key):-1] for p in prefixes}
            conflicts = sorted(files & dirs)
            names = [(n, FILE) for n in sorted(files - dirs)] + [(n, DIR) for n in sorted(dirs - files)]
            names = [(n, k) for n, k in names if n]
        for name, kind in sorted(names):
            if name in known:
                continue
            if meta.inode == ROOT_INODE:
                child = 2 + self.buckets.index(name)
            else:
                self.store.max_counter += 1
                child = make_inode_id(self.store.ordinal, self.store.max_counter)
            entries.append([name, child, kind])
        body = {"dir": meta.inode, "entries": entries, "listed": True, "dirty": False}
        if conflicts:
            body["conflicts"] = conflicts
        self.log.append_command(Cmd.DIR_ENTRY_ADD, body)
        self.store.apply(Cmd.DIR_ENTRY_ADD, body)

    def local_dir(self, inode: int, bucket: str = "", key: str = "") -> InodeMeta:
        meta = self.local_meta(inode, DIR, bucket, key)
        if meta.deleted:
            raise NotFound(f"directory {inode} was removed")
        if not meta.is_dir:
            raise NotADirectory(f"inode {inode}")
        self.ensure_listed(meta)
        return meta

    # -- read handlers -------------------------------------------------

    def _require_owner(self, key: str) -> None:
        if not self.owns(key):
            raise NodeListStale(self.ring.to_wire() if self.ring else None)

    def _h_Lookup(self, src, b):
        self.check_version(b)
        self._require_owner(placement_key(b["dir"]))
        meta = self.local_dir(b["dir"], b.get("bucket", ""), b.get("key", ""))
        if self.data_locked(placement_key(meta.inode)):
            raise Locked(f"directory {meta.inode}")
        name = b["name"]
        if name in self.store.conflicts.get(meta.inode, ()):
            raise TypeConflict(f"{meta.key}{name} is both a file and a directory")
        entry = self.store.dirs[meta.inode].entries.get(name)
        if entry is None:
            raise NotFound(f"{meta.bucket}/{meta.key}{name}")
        child, kind = entry
        if meta.inode == ROOT_INODE:
            return {"inode": child, "kind": kind, "bucket": name, "key": ""}
        return {"inode": child, "kind": kind, "bucket": meta.bucket,
                "key": meta.key + name + ("/" if kind == DIR else "")}

    def _h_GetMeta(self, src, b):
        self.check_version(b)
        self._require_owner(placement_key(b["inode"]))
        meta = self.local_meta(b["inode"], b.get("kind"), b.get("bucket", ""), b.get("key", ""))
        if self.data_locked(placement_key(meta.inode)):
            raise Locked(f"inode {meta.inode}")
        return meta.to_wire()

    def _h_ReadDir(self, src, b):
        self.check_version(b)
        self._require_owner(placement_key(b["dir"]))
        meta = self.local_dir(b["dir"], b.get("bucket", ""), b.get("key", ""))
        if self.data_locked(placement_key(meta.inode)):
            raise Locked(f"directory {meta.inode}")
        return {"meta": meta.to_wire(), "entries": self.store.dirs[meta.inode].to_wire()}

    def _h_ReadChunk(self, src, b):
        self.check_version(b)
        key = placement_key(b["inode"], b["chunk"], self.chunk_size)
        self._require_owner(key)
        if self.data_locked(key):
            raise Locked(f"chunk {key}")
        return self.read_local_chunk(b["inode"], b["chunk"], b["at"], b["n"], b.get("ext"))

    # -- staging -------------------------------------------------------

    def writable(self, kind: str = "data") -> None:
        if self.frozen or (self.leaving and kind == "data"):
            raise ReadOnly(f"{self.id} is migrating")

    def _h_StageWrite(self, src, b):
        self.check_version(b)
        inode, chunk = b["inode"], b["chunk"]
        self._require_owner(placement_key(inode, chunk, self.chunk_size))
        if self.store.has_staged(inode, chunk, b["sid"]):
            return {"staged": b["sid"]}
        self.writable()
        data = b["data"]
        if b["at"] < 0 or b["at"] + len(data) > self.chunk_size:
            raise UsageError("staged write crosses a chunk boundary")
        ref = self.log.append_second_level(data)
        self.log.append_command(Cmd.STAGE_WRITE, {"sid": b["sid"], "inode": inode, "chunk": chunk,
                                                  "at": b["at"], "ref": ref.to_wire()})
        self.store.stage(b["sid"], inode, chunk, b["at"], ref)
        return {"staged": b["sid"]}

    # -- transaction requests ------------------------------------------

    def _h_TxRequest(self, src, b):
        self.check_version(b)
        op = b["op"]
        body = getattr(self, "op_" + op, None)
        if body is None:
            raise ProtocolError(f"unknown operation {op}")
        client, seq, args = b["client"], b["seq"], b["args"]
        return run_coordinated(self, client, seq, lambda: body(client, seq, args))

    # -- participant ---------------------------------------------------

    def prepare_kind(self, part: dict) -> str:
        return "RingCheck" if part.get("kind") == "membership" else "Prepare"

    def decision_kind(self, kind: str, decision: str) -> str:
        if kind == "membership":
            return "ListCommit" if decision == "commit" else "ListAbort"
        return "Commit" if decision == "commit" else "Abort"

    def prepare_body(self, txid: TxId, part: dict) -> dict:
        body = dict(part, txid=txid.to_wire())
        body["v"] = self.ring.version if self.ring else 0
        return body

    def _check_prepare(self, part: dict) -> None:
        kind = part.get("kind", "data")
        if kind == "membership":
            return
        self.check_version(part)
        for res in part.get("locks", []):
            self._require_owner(res)
        self.writable(kind)

    def prepare_local(self, txid: TxId, part: dict, role: str, coord: dict | None = None) -> Generator:
        try:
            self._check_prepare(part)
            rec = self.txn.begin_prepare(txid, part.get("locks", []), part.get("ops", []), role,
                                         part.get("kind", "data"), coord, part.get("record", "meta"))
        except FsError as exc:
            return vote_no(exc)
        rec.task = self.spawn(self._prepare_body(rec, part), name=f"prepare {txid.key}")
        return (yield Join(rec.task))

    def _prepare_body(self, rec: TxRecord, part: dict) -> Generator:
        try:
            self.validate_ops(rec.ops, part)
            ops = yield from self.prepare_action(rec.txid, part)
        except FsError as exc:
            self.txn.cancel_prepare(rec, exc)
            return vote_no(exc)
        self.txn.finish_prepare(rec, ops)
        return vote_yes()

    def _existing_vote(self, txid: TxId):
        rec = self.txn.records.get(txid.key)
        if rec is not None:
            return rec
        status, reply = self.txn.dedup.lookup(txid)
        if status == "done":
            if "vote" in reply:
                return reply
            return vote_yes() if reply.get("ack") == "committed" else vote_no(ProtocolError("already aborted"))
        if status == "evicted":
            raise ProtocolError(f"prepare for evicted transaction {txid.key}")
        return None

    def _h_Prepare(self, src, b):
        txid = TxId.from_wire(b["txid"])
        existing = self._existing_vote(txid)
        if isinstance(existing, TxRecord):
            if existing.task is not None and not existing.task.done:
                return (yield Join(existing.task))
            return vote_yes()
        if existing is not None:
            return existing
        return (yield from self.prepare_local(txid, b, role="participant"))

    _h_RingCheck = _h_Prepare

    def _h_Commit(self, src, b):
        txid = TxId.from_wire(b["txid"])
        rec = self.txn.records.get(txid.key)
        if rec is not None and rec.task is not None and not rec.task.done:
            yield Join(rec.task)
        return self.txn.commit(txid)

    def _h_Abort(self, src, b):
        txid = TxId.from_wire(b["txid"])
        rec = self.txn.records.get(txid.key)
        if rec is not None and rec.task is not None and not rec.task.done:
            yield Join(rec.task)
        return self.txn.abort(txid)

    _h_ListCommit = _h_Commit
    _h_ListAbort = _h_Abort

    # -- op validation and prepare-time actions ------------------------

    def validate_ops(self, ops: list, part: dict) -> None:
        from .errors import Conflict, Exists, NotEmpty

        metas, dirs = self.store.metas, self.store.dirs
        for check in part.get("checks", []):
            name, args = check[0], check[1:]
            if name == "meta_live":
                meta = metas.get(args[0])
                if meta is None or meta.deleted:
                    raise NotFound(f"inode {args[0]}")
            elif name == "meta_absent":
                if args[0] in metas:
                    raise Conflict(f"inode {args[0]} already exists")
            elif name == "version":
                meta = metas.get(args[0])
                if meta is None:
                    raise Conflict(f"inode {args[0]} is not cached here")
                if meta.deleted:
                    raise NotFound(f"inode {args[0]}")
                if meta.version != args[1]:
                    raise Conflict(f"inode {args[0]} changed (v{meta.version} != v{args[1]})")
            elif name == "entry_absent":
                table = dirs.get(args[0])
                if table is not None and args[1] in table.entries:
                    raise Exists(args[1])
            elif name == "entry_is":
                table = dirs.get(args[0])
                entry = table.entries.get(args[1]) if table else None
                if entry is None:
                    raise NotFound(args[1])
                if entry[0] != args[2]:
                    raise Conflict(f"{args[1]} now names inode {entry[0]}")
            elif name == "dir_empty":
                meta = metas.get(args[0])
                if meta is None or not meta.listed:
                    raise Conflict(f"directory {args[0]} not listed")
                if len(dirs.get(args[0], ())):
                    raise NotEmpty(f"directory {args[0]}")
            else:
                raise ProtocolError(f"unknown check {name}")

    def prepare_action(self, txid: TxId, part: dict) -> Generator:
        action = part.get("action")
        if action is None:
            return None
        if action == "localize":
            return self._localize_action(part)
        if action == "upload":
            return self._upload_action(part)
        if action == "membership":
            return (yield from self._membership_action(txid, part))
        raise ProtocolError(f"unknown prepare action {action}")
        yield  # pragma: no cover

    def _localize_action(self, part: dict) -> list:
        ext = part.get("extra", {}).get("ext")
        ops = []
        for cmd, body in part["ops"]:
            if Cmd(cmd) is Cmd.LOCALIZE_CHUNK and "ref" not in body:
                data = self.read_local_chunk(body["inode"], body["chunk"], 0, body["length"], ext)
                body = dict(body)
                if data:
                    body["ref"] = self.log.append_second_level(data).to_wire()
                else:
                    body["ref"] = SecondLevelRef(0, 0, 0).to_wire()
            ops.append([cmd, body])
        return ops

    def _upload_action(self, part: dict) -> None:
        extra = part["extra"]
        for chunk, number, length in extra["parts"]:
            data = self.read_local_chunk(extra["inode"], chunk, 0, length, extra.get("ext"))
            self.ext.mpu_add(extra["upload"], number, data)
        return None

    # -- background flush ----------------------------------------------

    def _flush_tick(self) -> None:
        if self.frozen or self.left or self.ring is None:
            return
        due = self.expired_dirty(self.sim.now)
        for inode in due:
            if inode in self.persisting:
                continue
            self.persisting.add(inode)
            self.spawn(self._background_persist(inode), name=f"bg-persist {inode}")

    def background_flush(self, now: int | None = None, force: bool = False) -> Generator:
        """Persist every owned dirty inode whose dirty age reached the flush interval."""
        done = []
        for inode in self.expired_dirty(self.sim.now if now is None else now, force):
            seq = self.next_internal_seq()
            try:
                out = yield from run_coordinated(self, self.client_id, seq,
                                                 lambda i=inode, s=seq: self.op_persist(self.client_id, s,
                                                                                         {"inode": i}))
            except FsError as exc:
                logger.info("persist of %s on %s failed: %r", inode, self.id, exc)
                continue
            if out.get("persisted"):
                done.append(inode)
        return done

    def expired_dirty(self, now: int, force: bool = False) -> list[int]:
        out = []
        for meta in self.store.dirty_metas():
            if not self.owns(placement_key(meta.inode)):
                continue
            since = meta.dirty_since if meta.dirty_since is not None else meta.mtime
            if force or now - since >= (self.flush_interval or 0):
                out.append(meta.inode)
        return sorted(out)

    def _background_persist(self, inode: int) -> Generator:
        try:
            seq = self.next_internal_seq()
            yield from run_coordinated(self, self.client_id, seq,
                                       lambda: self.op_persist(self.client_id, seq, {"inode": inode}))
        except FsError as exc:
            logger.info("background persist of %s on %s failed: %r", inode, self.id, exc)
        finally:
            self.persisting.discard(inode)


__all__ = ["CacheNode", "NodeCrash"]
