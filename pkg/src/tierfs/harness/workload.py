"""Deterministic workload traces and their application to a cluster and a reference model."""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass

from ..refmodel import RefFS
from .scenario import WorkloadSpec


@dataclass(frozen=True)
class TraceOp:
    op: str
    path: str
    offset: int = 0
    length: int = 0
    payload: bytes = b""
    session: int = 0

    def line(self) -> str:
        digest = hashlib.sha256(self.payload).hexdigest()[:16] if self.payload else "-"
        return f"{self.op} {self.path} {self.offset} {self.length} {digest} s{self.session}"


def payload(rng: random.Random, n: int) -> bytes:
    return rng.randbytes(n)


def gen_workload(spec: WorkloadSpec, seed: int) -> list[TraceOp]:
    """mkdir every directory, then create and write each file in one piece.

    Files are spread round-robin over directories and sessions; sizes are
    drawn uniformly from ``[size_min, size_max] * unit``.
    """
    rng = random.Random(seed)
    root = f"/{spec.bucket}"
    dirs = [f"{root}/dir{i:03d}" for i in range(spec.dirs)]
    ops = [TraceOp("mkdir", d, session=i % spec.clients) for i, d in enumerate(dirs)]
    for i in range(spec.files):
        path = f"{dirs[i % len(dirs)] if dirs else root}/file{i:05d}"
        size = rng.randint(spec.size_min, spec.size_max) * spec.unit
        ops.append(TraceOp("write", path, 0, size, payload(rng, size), session=i % spec.clients))
    return ops


def apply_to_ref(ref: RefFS, ops: list[TraceOp]) -> None:
    for o in ops:
        if o.op == "mkdir":
            ref.mkdir(o.path)
        elif o.op == "write":
            ref.create(o.path)
            ref.write(o.path, o.offset, o.payload)
        else:
            raise ValueError(f"unsupported trace op {o.op}")


def apply_to_cluster(cluster, ops: list[TraceOp], mode: str = "strict") -> None:
    sessions = {}
    for o in ops:
        s = sessions.get(o.session)
        if s is None:
            s = sessions[o.session] = cluster.session(f"client{o.session}", mode)
        if o.op == "mkdir":
            cluster.run(s, s.mkdir(o.path))
        elif o.op == "write":
            cluster.run(s, s.write_path(o.path, o.payload, o.offset))
        else:
            raise ValueError(f"unsupported trace op {o.op}")
