"""In-process S3-like object store with multipart uploads, fault injection and a call log."""

from __future__ import annotations

import hashlib
import itertools
import urllib.parse
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ExternalError, FsError, NotFound


class PreconditionFailed(FsError):
    pass


@dataclass(frozen=True)
class ExternalRange:
    bucket: str
    key: str
    offset: int
    length: int


@dataclass
class Fault:
    """Fail the ``ordinal``-th call (1-based) to ``op``.

    ``action`` is ``"fail-once"``, ``"fail-n"`` (fail ``count`` consecutive
    calls starting at ``ordinal``) or ``"hang"`` (the call raises and the
    caller is expected to treat it as a timeout).
    """

    op: str
    ordinal: int = 1
    action: str = "fail-once"
    count: int = 1

    def matches(self, n: int) -> bool:
        if self.action == "fail-n":
            return self.ordinal <= n < self.ordinal + self.count
        return n == self.ordinal


@dataclass
class _Upload:
    bucket: str
    key: str
    parts: dict[int, bytes] = field(default_factory=dict)


class ObjectStore:
    def __init__(self, buckets=(), store_dir: str | Path | None = None):
        self.buckets: dict[str, dict[str, bytes]] = {b: {} for b in buckets}
        self.etags: dict[tuple[str, str], str] = {}
        self.pending: dict[str, _Upload] = {}
        self.call_log: list[tuple[str, str]] = []
        self.faults: list[Fault] = []
        self._counts: dict[str, int] = {}
        self._upload_ids = itertools.count(1)
        self._generation = itertools.count(1)
        self.store_dir = Path(store_dir) if store_dir else None

    # -- observability -------------------------------------------------

    def _record(self, op: str, *args) -> None:
        digest = " ".join(str(a) for a in args)
        self.call_log.append((op, digest))
        n = self._counts[op] = self._counts.get(op, 0) + 1
        for fault in self.faults:
            if fault.op == op and fault.matches(n):
                raise ExternalError(f"injected {fault.action} on {op} #{n}")

    def calls(self, op: str | None = None) -> list[tuple[str, str]]:
        return [c for c in self.call_log if op is None or c[0] == op]

    def count(self, op: str) -> int:
        return sum(1 for c in self.call_log if c[0] == op)

    def call_log_lines(self) -> list[str]:
        return [f"{op} {digest}" for op, digest in self.call_log]

    # -- objects -------------------------------------------------------

    def _bucket(self, bucket: str) -> dict[str, bytes]:
        try:
            return self.buckets[bucket]
        except KeyError:
            raise NotFound(f"no bucket {bucket}") from None

    def _put(self, bucket: str, key: str, data: bytes) -> str:
        self._bucket(bucket)[key] = bytes(data)
        etag = f"{hashlib.md5(data).hexdigest()}-{next(self._generation)}"
        self.etags[(bucket, key)] = etag
        return etag

    def get_range(self, bucket: str, key: str, offset: int, length: int) -> bytes:
        self._record("get_range", bucket, key, offset, length)
        objects = self._bucket(bucket)
        if key not in objects:
            raise NotFound(f"{bucket}/{key}")
        return objects[key][offset:offset + length]

    def get_object(self, bucket: str, key: str) -> bytes:
        self._record("get_object", bucket, key)
        objects = self._bucket(bucket)
        if key not in objects:
            raise NotFound(f"{bucket}/{key}")
        return objects[key]

    def head_object(self, bucket: str, key: str) -> tuple[int, str]:
        """Size and etag of an object."""
        self._record("head_object", bucket, key)
        objects = self._bucket(bucket)
        if key not in objects:
            raise NotFound(f"{bucket}/{key}")
        return len(objects[key]), self.etags[(bucket, key)]

    def put_object(self, bucket: str, key: str, data: bytes) -> str:
        self._record("put_object", bucket, key, len(data))
        return self._put(bucket, key, data)

    def delete_object(self, bucket: str, key: str, if_match: str | None = None) -> None:
        """Delete, optionally only when the current etag equals ``if_match``.

        Deleting a missing key succeeds, as in S3.
        """
        self._record("delete_object", bucket, key)
        objects = self._bucket(bucket)
        if key not in objects:
            return
        if if_match is not None and self.etags.get((bucket, key)) != if_match:
            raise PreconditionFailed(f"{bucket}/{key} etag changed")
        del objects[key]
        self.etags.pop((bucket, key), None)

    def list_prefix(self, bucket: str, prefix: str = "", delimiter: str = "/") -> tuple[list[str], list[str]]:
        self._record("list_prefix", bucket, prefix)
        keys, prefixes = [], set()
        for key in sorted(self._bucket(bucket)):
            if not key.startswith(prefix):
                continue
            rest = key[len(prefix):]
            cut = rest.find(delimiter) if delimiter else -1
            if cut >= 0:
                prefixes.add(prefix + rest[:cut + 1])
            else:
                keys.append(key)
        return keys, sorted(prefixes)

    # -- multipart -----------------------------------------------------

    def mpu_begin(self, bucket: str, key: str) -> str:
        self._record("mpu_begin", bucket, key)
        self._bucket(bucket)
        upload_id = f"u{next(self._upload_ids)}"
        self.pending[upload_id] = _Upload(bucket, key)
        return upload_id

    def _upload(self, upload_id: str) -> _Upload:
        try:
            return self.pending[upload_id]
        except KeyError:
            raise NotFound(f"no upload {upload_id}") from None

    def mpu_add(self, upload_id: str, part_number: int, data: bytes) -> str:
        self._record("mpu_add", upload_id, part_number, len(data))
        upload = self._upload(upload_id)
        upload.parts[part_number] = bytes(data)
        return hashlib.md5(data).hexdigest()

    def mpu_commit(self, upload_id: str, parts: list[int]) -> str:
        self._record("mpu_commit", upload_id, len(parts))
        upload = self._upload(upload_id)
        missing = [p for p in parts if p not in upload.parts]
        if missing:
            raise PreconditionFailed(f"upload {upload_id} missing parts {missing}")
        data = b"".join(upload.parts[p] for p in sorted(parts))
        del self.pending[upload_id]
        return self._put(upload.bucket, upload.key, data)

    def mpu_abort(self, upload_id: str) -> None:
        self._record("mpu_abort", upload_id)
        self._upload(upload_id)
        del self.pending[upload_id]

    def list_uploads(self, bucket: str, key: str) -> list[str]:
        """Upload ids still open for exactly ``bucket/key``."""
        self._record("list_uploads", bucket, key)
        return sorted((u for u, up in self.pending.items() if up.bucket == bucket and up.key == key),
                      key=lambda u: int(u[1:]))

    # -- inspection (not logged) ---------------------------------------

    def snapshot(self) -> dict[str, dict[str, bytes]]:
        return {b: dict(objs) for b, objs in self.buckets.items()}

    def mutate_out_of_band(self, bucket: str, key: str, data: bytes) -> None:
        """Change an object behind the cluster's back (no call-log record)."""
        self._put(bucket, key, data)

    def dump(self, store_dir: str | Path | None = None) -> None:
        root = Path(store_dir or self.store_dir)
        for bucket, objects in self.buckets.items():
            bdir = root / bucket
            bdir.mkdir(parents=True, exist_ok=True)
            for key, data in objects.items():
                (bdir / urllib.parse.quote(key, safe="")).write_bytes(data)
