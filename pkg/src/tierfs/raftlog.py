"""Per-node write-ahead log with second-level bulk logs.

On-disk layout (little-endian)::

    <node_dir>/wal.log       sequence of entries
        term        u64
        command_id  u16
        length      u32   payload byte count
        checksum    u32   CRC-32C over the three fields above + payload
        payload     bytes
    <node_dir>/sl/<file_id>.dat   raw appended bulk data

Only a single-member configuration is supported; ``term`` is always 1.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

from .commands import REGISTERED, Cmd, decode_payload, encode_payload
from .crc import crc32c
from .errors import ChecksumError, CorruptionError

logger = logging.getLogger(__name__)

HEADER = struct.Struct("<QHII")
_PREFIX = struct.Struct("<QHI")
DEFAULT_TERM = 1
DEFAULT_ROLLOVER = 64 * 1024 * 1024

DurableHook = Callable[[str, str], None]


class AppendError(OSError):
    pass


@dataclass(frozen=True)
class LogEntry:
    term: int
    command_id: int
    payload: bytes
    checksum: int | None = None

    @property
    def length(self) -> int:
        return len(self.payload)

    def compute_checksum(self) -> int:
        return crc32c(_PREFIX.pack(self.term, self.command_id, len(self.payload)) + self.payload)

    def encode(self) -> bytes:
        checksum = self.compute_checksum() if self.checksum is None else self.checksum
        return HEADER.pack(self.term, self.command_id, len(self.payload), checksum) + self.payload

    @classmethod
    def decode(cls, data: bytes, offset: int = 0, index: int = 1) -> tuple["LogEntry", int]:
        """Decode one entry at ``offset``; returns (entry, next offset)."""
        if len(data) - offset < HEADER.size:
            raise CorruptionError(index, "truncated header")
        term, cmd, length, checksum = HEADER.unpack_from(data, offset)
        start = offset + HEADER.size
        if len(data) - start < length:
            raise CorruptionError(index, "truncated payload")
        entry = cls(term, cmd, bytes(data[start:start + length]), checksum)
        if entry.compute_checksum() != checksum:
            raise ChecksumError(index)
        if cmd not in REGISTERED:
            raise ChecksumError(index, f"unknown command id {cmd}")
        return entry, start + length

    def command(self) -> Cmd:
        return Cmd(self.command_id)

    def body(self):
        return decode_payload(self.payload)


@dataclass(frozen=True)
class SecondLevelRef:
    file_id: int
    offset: int
    length: int

    def to_wire(self) -> dict:
        return {"file": self.file_id, "off": self.offset, "len": self.length}

    @classmethod
    def from_wire(cls, d: dict) -> "SecondLevelRef":
        return cls(d["file"], d["off"], d["len"])


def iter_entries(data: bytes) -> Iterator[tuple[int, LogEntry]]:
    offset, index = 0, 1
    while offset < len(data):
        entry, offset = LogEntry.decode(data, offset, index)
        yield index, entry
        index += 1


def verify(log_bytes: bytes) -> int | None:
    """Return None if every entry verifies, else the 1-based index of the first bad one."""
    try:
        for _ in iter_entries(log_bytes):
            pass
    except ChecksumError as e:
        return e.index
    return None


def verify_dir(node_dir: str | os.PathLike) -> tuple[int, int | None]:
    """(number of good entries before the first bad one, index of the bad entry or None)."""
    data = (Path(node_dir) / "wal.log").read_bytes()
    good = 0
    try:
        for index, _ in iter_entries(data):
            good = index
    except ChecksumError as e:
        return good, e.index
    return good, None


class RaftLog:
    def __init__(
        self,
        node_dir: str | os.PathLike,
        *,
        rollover: int = DEFAULT_ROLLOVER,
        fsync: bool = False,
        on_durable: DurableHook | None = None,
    ):
        self.dir = Path(node_dir)
        self.sl_dir = self.dir / "sl"
        self.sl_dir.mkdir(parents=True, exist_ok=True)
        self.wal_path = self.dir / "wal.log"
        self.rollover = rollover
        self.fsync = fsync
        self.on_durable = on_durable
        self.term = DEFAULT_TERM
        self.last_index = 0
        self._wal = open(self.wal_path, "ab")
        existing = sorted(int(p.stem) for p in self.sl_dir.glob("*.dat"))
        self._sl_id = existing[-1] if existing else 0
        self._sl_size = self._sl_path(self._sl_id).stat().st_size if existing else 0
        self._sl = open(self._sl_path(self._sl_id), "ab")
        self._sl_read: dict[int, object] = {}
        self.closed = False

    def _sl_path(self, file_id: int) -> Path:
        return self.sl_dir / f"{file_id}.dat"

    def _durable(self, phase: str, label: str) -> None:
        if self.on_durable is not None:
            self.on_durable(phase, label)

    def _sync(self, f) -> None:
        f.flush()
        if self.fsync:
            os.fsync(f.fileno())

    def append(self, entry: LogEntry) -> int:
        if self.closed:
            raise AppendError("log closed")
        if entry.command_id not in REGISTERED:
            raise AppendError(f"unregistered command id {entry.command_id}")
        label = Cmd(entry.command_id).name
        self._durable("before", label)
        self._wal.write(entry.encode())
        self._sync(self._wal)
        self.last_index += 1
        self._durable("after", label)
        return self.last_index

    def append_command(self, cmd: Cmd, body) -> int:
        return self.append(LogEntry(self.term, int(cmd), encode_payload(body)))

    def append_second_level(self, data: bytes) -> SecondLevelRef:
        if not data:
            raise ValueError("second-level append requires data")
        if self.closed:
            raise AppendError("log closed")
        self._durable("before", "SECOND_LEVEL")
        if self._sl_size and self._sl_size + len(data) > self.rollover:
            self._sl.close()
            self._sl_id += 1
            self._sl_size = 0
            self._sl = open(self._sl_path(self._sl_id), "ab")
        ref = SecondLevelRef(self._sl_id, self._sl_size, len(data))
        self._sl.write(data)
        self._sync(self._sl)
        self._sl_size += len(data)
        self._durable("after", "SECOND_LEVEL")
        return ref

    def read_second_level(self, ref: SecondLevelRef) -> bytes:
        path = self._sl_path(ref.file_id)
        if ref.file_id == self._sl_id:
            self._sl.flush()
        try:
            size = path.stat().st_size
        except FileNotFoundError:
            raise CorruptionError(0, f"second-level file {ref.file_id} missing") from None
        if ref.offset < 0 or ref.length < 0 or ref.offset + ref.length > size:
            raise CorruptionError(0, f"second-level ref {ref} beyond end of file ({size} bytes)")
        f = self._sl_read.get(ref.file_id)
        if f is None:
            f = self._sl_read[ref.file_id] = open(path, "rb")
        f.seek(ref.offset)
        return f.read(ref.length)

    def read_bytes(self) -> bytes:
        self._wal.flush()
        return self.wal_path.read_bytes()

    def entries(self) -> Iterator[tuple[int, LogEntry]]:
        return iter_entries(self.read_bytes())

    def replay(self, apply: Callable[[int, LogEntry], None]) -> int:
        """Apply every durable entry in order; a bad entry halts before it is applied."""
        applied = 0
        for index, entry in self.entries():
            apply(index, entry)
            applied = index
        self.last_index = applied
        return applied

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        self._wal.close()
        self._sl.close()
        for f in self._sl_read.values():
            f.close()
        self._sl_read.clear()


__all__ = [
    "AppendError",
    "HEADER",
    "LogEntry",
    "RaftLog",
    "SecondLevelRef",
    "decode_payload",
    "encode_payload",
    "iter_entries",
    "verify",
    "verify_dir",
]
