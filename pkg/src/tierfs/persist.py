"""Uploading dirty inodes to the object store.

Small files (size <= chunk size) go up with a single put_object and commit
with one log record. Larger files use a multipart upload whose parts are
added by the chunk owners while they prepare; the upload id is logged
before any part is sent so a restarted coordinator can abort it.
"""

from __future__ import annotations

from typing import TYPE_CHECKING, Generator

from .commands import Cmd
from .errors import Aborted, ExternalError, Locked, NotFound, TransientError
from .extstore import PreconditionFailed
from .namespace import Parts, op
from .ring import placement_key
from .simnet import Sleep
from .store import ROOT_INODE, InodeMeta
from .txn import TxId, coordinate

if TYPE_CHECKING:
    from .node import CacheNode

PERSIST_ATTEMPTS = 12


class PersistOps:
    """Mixin for :class:`tierfs.node.CacheNode`."""

    def op_persist(self: "CacheNode", client: str, seq: int, a: dict) -> Generator:
        inode = a["inode"]
        attempt = 0
        while True:
            self._own_or_stale(placement_key(inode))
            meta = self.store.metas.get(inode)
            if meta is None or not meta.dirty:
                return {"persisted": False}
            txid = self.txn.next_txid(client, seq)
            try:
                if meta.inode == ROOT_INODE or (meta.is_dir and meta.key == "" and not meta.deleted):
                    self._persist_local(txid, meta, None)
                elif meta.deleted:
                    self._persist_local(txid, meta, self._delete_external)
                elif meta.is_dir or meta.size <= self.chunk_size:
                    self._persist_local(txid, meta, self._put_whole)
                else:
                    yield from self._persist_multipart(txid, meta)
                return {"persisted": True}
            except TransientError as exc:
                attempt += 1
                if attempt >= PERSIST_ATTEMPTS:
                    raise Aborted(exc) from None
                self.sim.note_retry((client, seq))
                self.txn.counters["retried"] += 1
                yield Sleep(self.sim.backoff(attempt))

    # -- single-record path --------------------------------------------

    def _persist_local(self: "CacheNode", txid: TxId, meta: InodeMeta, upload) -> None:
        """Lock, upload synchronously, then commit with one PERSISTED_INODE record."""
        lock = placement_key(meta.inode)
        if not self.txn.locks.acquire([lock], txid.key):
            raise Locked(f"inode {meta.inode}")
        try:
            self.writable("persist")
            clear = {"inode": meta.inode}
            ops = [[int(Cmd.CLEAR_DIRTY_META), clear]]
            etag = None
            if upload is not None:
                etag = upload(meta)
            if etag is not None and not meta.deleted:
                clear.update(key=meta.key, etag=etag, size=meta.size)
                if not meta.is_dir:
                    ops.append(op(Cmd.CLEAR_DIRTY_CHUNK, inode=meta.inode, chunk=0, bucket=meta.bucket,
                                  key=meta.key))
            body = {"txid": txid.to_wire(), "inode": meta.inode, "bucket": meta.bucket, "key": meta.key,
                    "etag": etag, "ops": ops}
            self.log.append_command(Cmd.PERSISTED_INODE, body)
            self.apply_ops(ops, None)
            self.txn.counters["committed"] += 1
            self.txn._note_outcome(txid, {"status": "committed"})
        finally:
            self.txn.locks.release(txid.key)

    def _put_whole(self: "CacheNode", meta: InodeMeta) -> str:
        if meta.is_dir:
            data = b""
        else:
            data = self.read_local_chunk(meta.inode, 0, 0, meta.size, meta.ext_binding())
        etag = self.ext.put_object(meta.bucket, meta.key, data)
        self._delete_stale_key(meta)
        return etag

    def _delete_external(self: "CacheNode", meta: InodeMeta) -> None:
        if meta.ext_key and meta.ext_etag:
            self._delete_if_unchanged(meta.ext_bucket or meta.bucket, meta.ext_key, meta.ext_etag)
        return None

    def _delete_stale_key(self: "CacheNode", meta: InodeMeta) -> None:
        """After a rename, remove the object at the old key if it is still ours."""
        if meta.ext_key is not None and meta.ext_key != meta.key and meta.ext_etag:
            self._delete_if_unchanged(meta.ext_bucket or meta.bucket, meta.ext_key, meta.ext_etag)

    def _delete_if_unchanged(self: "CacheNode", bucket: str, key: str, etag: str) -> None:
        try:
            self.ext.delete_object(bucket, key, if_match=etag)
        except (PreconditionFailed, NotFound):
            pass

    # -- multipart path ------------------------------------------------

    def _persist_multipart(self: "CacheNode", txid: TxId, meta: InodeMeta) -> Generator:
        cs = self.chunk_size
        ext = meta.ext_binding()
        bucket, key, size, inode = meta.bucket, meta.key, meta.size, meta.inode
        parts = Parts(self)
        local = parts.meta(inode, kind="persist")
        offsets = list(range(0, size, cs))
        for off in offsets[1:]:
            part = parts.chunk(inode, off, op(Cmd.CLEAR_DIRTY_CHUNK, inode=inode, chunk=off, bucket=bucket, key=key),
                               kind="persist")
            part["record"] = "chunk"
            if part is local:
                part.setdefault("uploads", []).append(off)
                continue
            part["action"] = "upload"
            extra = part.setdefault("extra", {"inode": inode, "ext": ext, "parts": []})
            extra["parts"].append([off, off // cs + 1, min(cs, size - off)])
        # chunks that happen to live on the coordinator are uploaded by it directly
        local_chunks = [0] + local.pop("uploads", [])
        local["record"] = "meta"
        state: dict = {}

        def after_local_prepare():
            upload = self.ext.mpu_begin(bucket, key)
            state["upload"] = upload
            self.log.append_command(Cmd.MPU_BEGIN, {"txid": txid.to_wire(), "bucket": bucket, "key": key,
                                                    "upload": upload})
            self.txn.mpu[txid.key] = {"upload": upload}
            for part in parts.parts.values():
                if part.get("action") == "upload":
                    part["extra"]["upload"] = upload
            for off in local_chunks:
                data = self.read_local_chunk(inode, off, 0, min(cs, size - off), ext)
                self.ext.mpu_add(upload, off // cs + 1, data)
            return
            yield  # pragma: no cover

        def before_decision():
            state["etag"] = self.ext.mpu_commit(state["upload"], [i + 1 for i in range(len(offsets))])
            self._delete_stale_key(meta)
            return
            yield  # pragma: no cover

        def on_abort():
            if "upload" in state and "etag" not in state:
                self.abort_upload(state["upload"])

        def decision_body():
            return {"inode": inode, "bucket": bucket, "key": key, "etag": state["etag"], "size": size}

        def local_commit_ops():
            return self.persist_local_ops(decision_body())

        try:
            yield from coordinate(self, txid, parts.build(), kind="persist", commit_cmd=Cmd.PERSISTED_INODE,
                                  hooks={"upload_target": [bucket, key], "after_local_prepare": after_local_prepare,
                                         "before_decision": before_decision, "on_abort": on_abort,
                                         "decision_body": decision_body, "local_commit_ops": local_commit_ops})
        except ExternalError as exc:
            raise Aborted(exc) from None

    def persist_local_ops(self: "CacheNode", persisted: dict) -> list:
        ops = [op(Cmd.CLEAR_DIRTY_META, inode=persisted["inode"], key=persisted["key"], etag=persisted["etag"],
                  size=persisted["size"]),
               op(Cmd.CLEAR_DIRTY_CHUNK, inode=persisted["inode"], chunk=0, bucket=persisted["bucket"],
                  key=persisted["key"])]
        cs = self.chunk_size
        for off in range(cs, persisted["size"], cs):
            if self.owns(placement_key(persisted["inode"], off, cs)):
                ops.append(op(Cmd.CLEAR_DIRTY_CHUNK, inode=persisted["inode"], chunk=off,
                              bucket=persisted["bucket"], key=persisted["key"]))
        return ops
