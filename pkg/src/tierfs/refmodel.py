"""In-memory reference filesystem used as an oracle for cluster behaviour.

It is deliberately naive: a dict from path to bytes (files) or ``None``
(directories), with the same error classes the cluster raises.
"""

from __future__ import annotations

from .errors import Exists, IsADirectory, NotADirectory, NotEmpty, NotFound, PermissionDenied, UsageError
from .fsops import parent_and_name, split_path


class RefFS:
    def __init__(self, buckets=("data",)):
        self.nodes: dict[str, bytes | None] = {"/": None}
        for b in buckets:
            self.nodes["/" + b] = None

    @staticmethod
    def norm(path: str) -> str:
        return "/" + "/".join(split_path(path))

    def _get(self, path: str) -> bytes | None:
        path = self.norm(path)
        parts = split_path(path)
        for i in range(1, len(parts)):
            prefix = "/" + "/".join(parts[:i])
            if prefix not in self.nodes:
                raise NotFound(path)
            if self.nodes[prefix] is not None:
                raise NotADirectory(prefix)
        if path not in self.nodes:
            raise NotFound(path)
        return self.nodes[path]

    def is_dir(self, path: str) -> bool:
        return self._get(path) is None

    def _parent(self, path: str) -> str:
        parent, _ = parent_and_name(path)
        if not self.is_dir(parent):
            raise NotADirectory(parent)
        if parent == "/":
            raise PermissionDenied("buckets are fixed by configuration")
        return parent

    def _children(self, path: str) -> list[str]:
        prefix = self.norm(path).rstrip("/") + "/"
        return [p for p in self.nodes if p.startswith(prefix) and "/" not in p[len(prefix):] and p != prefix]

    # -- operations ----------------------------------------------------

    def create(self, path: str, exclusive: bool = False) -> None:
        try:
            cur = self._get(path)
        except NotFound:
            self._parent(path)
            self.nodes[self.norm(path)] = b""
            return
        if exclusive:
            raise Exists(path)
        if cur is None:
            raise IsADirectory(path)

    def mkdir(self, path: str) -> None:
        try:
            self._get(path)
        except NotFound:
            self._parent(path)
            self.nodes[self.norm(path)] = None
            return
        raise Exists(path)

    def write(self, path: str, offset: int, data: bytes) -> None:
        cur = self._get(path)
        if cur is None:
            raise IsADirectory(path)
        buf = bytearray(cur)
        if len(buf) < offset + len(data):
            buf.extend(b"\0" * (offset + len(data) - len(buf)))
        buf[offset:offset + len(data)] = data
        self.nodes[self.norm(path)] = bytes(buf)

    def read(self, path: str, offset: int = 0, n: int | None = None) -> bytes:
        cur = self._get(path)
        if cur is None:
            raise IsADirectory(path)
        return cur[offset:] if n is None else cur[offset:offset + n]

    def size(self, path: str) -> int:
        cur = self._get(path)
        return 0 if cur is None else len(cur)

    def truncate(self, path: str, size: int) -> None:
        cur = self._get(path)
        if cur is None:
            raise IsADirectory(path)
        self.nodes[self.norm(path)] = cur[:size] + b"\0" * max(0, size - len(cur))

    def unlink(self, path: str) -> None:
        self._parent(path)
        if self._get(path) is None:
            raise IsADirectory(path)
        del self.nodes[self.norm(path)]

    def rmdir(self, path: str) -> None:
        self._parent(path)
        if self._get(path) is not None:
            raise NotADirectory(path)
        if self._children(path):
            raise NotEmpty(path)
        del self.nodes[self.norm(path)]

    def readdir(self, path: str) -> list[str]:
        if not self.is_dir(path):
            raise NotADirectory(path)
        return sorted(p.rsplit("/", 1)[1] for p in self._children(path))

    def rename(self, src: str, dst: str) -> None:
        src, dst = self.norm(src), self.norm(dst)
        self._parent(src)
        moving = self._get(src)
        self._parent(dst)
        if src == dst:
            return
        try:
            target = self._get(dst)
            exists = True
        except NotFound:
            target, exists = None, False
        if exists:
            if moving is None:
                if target is not None:
                    raise NotADirectory(dst)
                if self._children(dst):
                    raise NotEmpty(dst)
            elif target is None:
                raise IsADirectory(dst)
        if moving is None and dst.startswith(src + "/"):
            raise UsageError("cannot move a directory into itself")
        if exists:
            del self.nodes[dst]
        moved = {p: v for p, v in self.nodes.items() if p == src or p.startswith(src + "/")}
        for p in moved:
            del self.nodes[p]
        for p, v in moved.items():
            self.nodes[dst + p[len(src):]] = v

    def files(self) -> dict[str, bytes]:
        return {p: v for p, v in self.nodes.items() if v is not None}

    def dirs(self) -> list[str]:
        return sorted(p for p, v in self.nodes.items() if v is None)
