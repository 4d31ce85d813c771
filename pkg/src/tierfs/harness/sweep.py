"""Exhaustive fault sweeps over one transaction.

A sweep first runs the operation fault-free to count its durable writes
(or messages), then reruns the same deterministic setup once per fault
point. After each faulty run the simulator drains, crashed nodes restart
and recover, and the cluster must show the operation either fully applied
or not applied at all.
"""

from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..cluster import Cluster
from ..errors import FsError
from ..ring import placement_key
from ..simnet import CrashFault, MessageFault


@dataclass
class SweepResult:
    points: int = 0
    outcomes: dict[str, int] = field(default_factory=dict)
    findings: list[str] = field(default_factory=list)
    duplicate_points: list[str] = field(default_factory=list)
    duplicate_findings: list[str] = field(default_factory=list)
    labels: list[str] = field(default_factory=list)

    def note(self, outcome: str) -> None:
        self.outcomes[outcome] = self.outcomes.get(outcome, 0) + 1


class Fixture:
    """Three nodes and one file whose three chunks live on three different nodes."""

    def __init__(self, root: Path, seed: int = 0, chunk_size: int = 1024, nodes: int = 3):
        if root.exists():
            shutil.rmtree(root)
        self.cluster = Cluster(root, chunk_size=chunk_size, seed=seed)
        for i in range(nodes):
            self.cluster.join(f"n{i + 1}")
        self.cs = chunk_size
        self.session = self.cluster.session("setup")
        c, s = self.cluster, self.session
        c.run(s, s.mkdir("/data/d"))
        ring = c.ring
        for i in range(200):
            path = f"/data/d/f{i}"
            info = c.run(s, s.open(path, "w", create=True))
            owners = {ring.owner(placement_key(info.inode, k * chunk_size, chunk_size)) for k in range(3)}
            c.run(s, s.close(info))
            if len(owners) == 3:
                self.path, self.inode = path, info.inode
                break
            c.run(s, s.unlink(path))
        else:  # pragma: no cover - depends on the hash only
            raise RuntimeError("no file spreads over three nodes")
        self.size = 3 * chunk_size
        self.old = bytes([0xA1]) * self.size
        self.new = bytes([0xB2]) * self.size
        c.run(s, s.write_path(self.path, self.old))
        c.settle()

    def nodes(self):
        return [self.cluster.nodes[n] for n in self.cluster.members()]

    def quiet_session(self, name: str):
        s = self.cluster.session(name)
        s.call_retries = 0
        s.tx_retries = 0
        return s

    def recover(self) -> None:
        c = self.cluster
        c.settle()
        for name in c.members():
            if not c.sim.alive(name):
                c.restart(name)
        c.settle()

    def leftovers(self) -> list[str]:
        out = []
        for node in self.nodes():
            if node.txn.locks.holders:
                out.append(f"{node.id} still holds locks {sorted(node.txn.locks.holders)}")
            if node.txn.incomplete():
                out.append(f"{node.id} has unresolved transactions")
        return out

    def read(self) -> bytes:
        s = self.cluster.session("reader")
        return self.cluster.run(s, s.read_path(self.path))

    def dirty_flags(self) -> list[bool]:
        flags = []
        for node in self.nodes():
            meta = node.store.metas.get(self.inode)
            if meta is not None and node.owns(placement_key(self.inode)):
                flags.append(meta.dirty)
            for (inode, off), chunk in node.store.chunks.items():
                if inode == self.inode and node.owns(placement_key(inode, off, self.cs)):
                    flags.append(chunk.dirty)
        return flags


def _faulty_run(root: Path, seed: int, arm: Callable, op: Callable, chunk_size: int):
    fx = Fixture(root, seed, chunk_size)
    arm(fx)
    s = fx.quiet_session("client")
    try:
        fx.cluster.run(s, op(fx, s))
        error = None
    except FsError as exc:
        error = exc
    fx.recover()
    return fx, error


def count_points(root: Path, seed: int, op: Callable, chunk_size: int) -> tuple[int, list[str], int]:
    """Durable writes and request messages made by ``op`` in a fault-free run."""
    fx = Fixture(root, seed, chunk_size)
    sim = fx.cluster.sim
    writes, trace = len(sim.durable_writes), len(sim.trace)
    s = fx.quiet_session("client")
    fx.cluster.run(s, op(fx, s))
    fx.cluster.settle()
    labels = [f"{node}:{label}" for _, node, label in sim.durable_writes[writes:]]
    messages = sum(1 for line in sim.trace[trace:] if line.split()[1].startswith("req:"))
    return len(labels), labels, messages


def _write_op(fx: Fixture, s):
    return s.write_path(fx.path, fx.new)


def _fsync_op(fx: Fixture, s):
    def gen():
        fh = yield from s.open(fx.path, "r")
        yield from s.fsync(fh)
        yield from s.close(fh)
    return gen()


def flush_crash_sweep(root: Path, seed: int = 0, chunk_size: int = 1024, messages: bool = True) -> SweepResult:
    """Crash before/after every durable write of a 3-participant write, and drop every message."""
    result = SweepResult()
    n, labels, n_msgs = count_points(root, seed, _write_op, chunk_size)
    result.labels = labels
    plans: list[tuple[str, Callable]] = []
    for k in range(1, n + 1):
        for when in ("before", "after"):
            plans.append((f"crash {when} #{k} {labels[k - 1]}",
                          lambda fx, k=k, w=when: fx.cluster.sim.faults.crashes.append(CrashFault(k, w))))
    if messages:
        for k in range(1, n_msgs + 1):
            for resp in (False, True):
                plans.append((f"drop {'response' if resp else 'request'} #{k}",
                              lambda fx, k=k, r=resp: fx.cluster.sim.faults.messages.append(
                                  MessageFault("drop", ordinal=k, responses=r))))
    for name, arm in plans:
        result.points += 1
        fx, error = _faulty_run(root, seed, arm, _write_op, chunk_size)
        got = fx.read()
        if got == fx.new:
            result.note("applied")
        elif got == fx.old:
            result.note("not-applied")
        else:
            result.findings.append(f"{name}: mixed content after recovery")
        result.findings += [f"{name}: {f}" for f in fx.leftovers()]
    return result


def fsync_crash_sweep(root: Path, scenario=None, seed: int | None = None, chunk_size: int = 1024) -> SweepResult:
    """Crash before/after every durable write of a multipart fsync (three chunks, three nodes).

    A crash just before the coordinator logs the persisted-inode record falls
    after mpu_commit: recovery presumes abort, the retried fsync uploads again,
    and the store must end up with identical bytes.
    """
    if scenario is not None:
        seed = scenario.seed if seed is None else seed
    seed = seed or 0
    result = SweepResult()
    n, labels, _ = count_points(root, seed, _fsync_op, chunk_size)
    result.labels = labels
    for k in range(1, n + 1):
        for when in ("before", "after"):
            name = f"crash {when} #{k} {labels[k - 1]}"
            result.points += 1
            fx, error = _faulty_run(root, seed, lambda fx, k=k, w=when: fx.cluster.sim.faults.crashes.append(
                CrashFault(k, w)), _fsync_op, chunk_size)
            ext = fx.cluster.ext
            flags = fx.dirty_flags()
            stored = ext.snapshot()["data"].get(fx.path.split("/", 2)[2])
            if all(flags):
                result.note("not-applied")
            elif not any(flags):
                result.note("applied")
                if stored != fx.old:
                    result.findings.append(f"{name}: clean flags but the store does not hold the content")
            else:
                result.findings.append(f"{name}: dirty flags partly cleared {flags}")
            if ext.pending:
                result.findings.append(f"{name}: multipart uploads left open {sorted(ext.pending)}")
            result.findings += [f"{name}: {f}" for f in fx.leftovers()]
            # a second fsync converges, re-uploading if the first one was rolled back
            s = fx.cluster.session("retry")
            fx.cluster.run(s, _fsync_op(fx, s))
            final = ext.snapshot()["data"].get(fx.path.split("/", 2)[2])
            if final != fx.old or any(fx.dirty_flags()):
                result.findings.append(f"{name}: retried fsync did not converge")
            commits = ext.count("mpu_commit")
            if when == "before" and labels[k - 1].endswith(":PERSISTED_INODE"):
                result.duplicate_points.append(name)
                if commits != 2 or ext.count("mpu_begin") != 2:
                    result.duplicate_findings.append(
                        f"{name}: expected two upload sequences, saw {commits} commits")
                if stored != fx.old or final != fx.old:
                    result.duplicate_findings.append(f"{name}: duplicate upload changed the object bytes")
    if not result.duplicate_points:
        result.duplicate_findings.append("no crash point between mpu_commit and the persisted-inode record")
    return result
