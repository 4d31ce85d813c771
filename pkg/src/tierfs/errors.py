"""Exception hierarchy shared by every layer of the cluster."""

from __future__ import annotations

import errno


class FsError(Exception):
    """Base class for filesystem-visible errors.

    ``persistent`` errors are propagated to the caller unchanged; transient
    ones are retried by clients and coordinators.
    """

    errno = errno.EIO
    persistent = True


class NotFound(FsError):
    errno = errno.ENOENT


class Exists(FsError):
    errno = errno.EEXIST


class NotEmpty(FsError):
    errno = errno.ENOTEMPTY


class NotADirectory(FsError):
    errno = errno.ENOTDIR


class IsADirectory(FsError):
    errno = errno.EISDIR


class TypeConflict(FsError):
    """Both ``a/b`` and ``a/b/`` exist in the bucket."""

    errno = errno.EIO


class CrossDevice(FsError):
    """Rename that cannot be expressed without rewriting external keys."""

    errno = errno.EXDEV


class PermissionDenied(FsError):
    errno = errno.EPERM


class UsageError(FsError):
    errno = errno.EINVAL


class BadHandle(UsageError):
    errno = errno.EBADF


class TransientError(FsError):
    persistent = False
    errno = errno.EAGAIN


class Locked(TransientError):
    """A resource is held by a prepared transaction."""


class Conflict(TransientError):
    """Optimistic version check failed during prepare."""


class Aborted(TransientError):
    """A transaction was aborted; carries the cause when known."""

    def __init__(self, cause: object = None):
        super().__init__(cause)
        self.cause = cause


class ReadOnly(TransientError):
    """The node is migrating data and refuses writes until the new ring commits."""


class NodeListStale(TransientError):
    """The request carried a node-list version different from the receiver's."""

    def __init__(self, node_list: dict | None = None):
        super().__init__(node_list["version"] if node_list else None)
        self.node_list = node_list


class RpcTimeout(TransientError):
    errno = errno.ETIMEDOUT


class ExternalError(TransientError):
    """Scripted or real failure of the object store."""


class ProtocolError(FsError):
    """A message arrived that the protocol cannot interpret (e.g. evicted TxId)."""


class LivelockError(RuntimeError):
    """A single transaction was retried beyond the configured bound."""


class ChecksumError(RuntimeError):
    """Log content failed verification; the node must halt."""

    def __init__(self, index: int, reason: str = "checksum mismatch"):
        super().__init__(f"log entry {index}: {reason}")
        self.index = index


class CorruptionError(ChecksumError):
    pass


class NodeCrash(BaseException):
    """Raised inside a handler to emulate a process crash at a durable-write boundary.

    Derives from BaseException so that handler-level ``except Exception``
    blocks cannot swallow it.
    """
