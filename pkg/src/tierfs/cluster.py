"""Cluster lifecycle: bootstrap, join, leave, scale to zero and cold start."""

from __future__ import annotations

import itertools
import logging
from pathlib import Path
from typing import Generator, Iterable

from .commands import Cmd
from .errors import FsError, NodeListStale, TransientError
from .extstore import ObjectStore
from .migration import MigrationPlan, affected_nodes, compute_migration_plan
from .node import CacheNode
from .raftlog import RaftLog, iter_entries
from .ring import Ring
from .simnet import FaultPlan, Sim, Sleep

logger = logging.getLogger(__name__)

DEFAULT_CHUNK = 64 * 1024
MEMBERSHIP_ATTEMPTS = 20

__all__ = [
    "Cluster",
    "MigrationPlan",
    "affected_nodes",
    "compute_migration_plan",
    "validate_version",
]


def validate_version(request_version: int, ring: Ring | None) -> None:
    """Reject a request whose node-list version differs from ours, attaching our list."""
    if ring is None or request_version != ring.version:
        raise NodeListStale(ring.to_wire() if ring is not None else None)


class _ClientEndpoint:
    """Clients only issue calls; they never serve any."""

    def handle(self, src, msg):
        raise FsError(f"client cannot serve {msg.kind}")

    def on_crash(self) -> None:
        pass

    def on_restart(self) -> None:
        pass


class Cluster:
    def __init__(self, root: str | Path, *, buckets: Iterable[str] = ("data",), chunk_size: int = DEFAULT_CHUNK,
                 flush_interval: int | None = None, seed: int = 0, sim: Sim | None = None,
                 ext: ObjectStore | None = None, faults: FaultPlan | None = None, latency: int = 1,
                 fsync: bool = False):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.buckets = sorted(buckets)
        self.chunk_size = chunk_size
        self.flush_interval = flush_interval
        self.sim = sim or Sim(seed, latency, faults=faults)
        self.ext = ext or ObjectStore(self.buckets)
        self.fsync = fsync
        self.nodes: dict[str, CacheNode] = {}
        self.node_dirs: list[Path] = []
        self.membership_log: list[tuple[str, str, int]] = []
        self._dir_ids = itertools.count(1)
        self.retired_counters = {"committed": 0, "aborted": 0, "retried": 0}

    # -- nodes ---------------------------------------------------------

    def _new_node(self, name: str) -> CacheNode:
        node_dir = self.root / f"{next(self._dir_ids):03d}-{name}"
        self.node_dirs.append(node_dir)
        node = CacheNode(name, node_dir, self.sim, self.ext, self.buckets, self.chunk_size,
                         self.flush_interval, self.fsync)
        self.nodes[name] = node
        self.sim.register(name, node)
        return node

    def members(self) -> list[str]:
        ring = self.ring
        return ring.nodes if ring is not None else []

    @property
    def ring(self) -> Ring | None:
        rings = [n.ring for n in self.nodes.values() if n.ring is not None and n.id in n.ring
                 and self.sim.alive(n.id)]
        return max(rings, key=lambda r: r.version) if rings else None

    def live_members(self) -> list[str]:
        return [n for n in self.members() if self.sim.alive(n)]

    def bootstrap(self, name: str) -> CacheNode:
        node = self._new_node(name)
        node.bootstrap()
        node.start()
        self.membership_log.append(("bootstrap", name, 1))
        return node

    def start(self, names: Iterable[str]) -> "Cluster":
        for name in names:
            self.join(name)
        return self

    def join(self, name: str, via: str | None = None) -> Ring:
        if not self.live_members():
            self.bootstrap(name)
            return self.ring
        node = self._new_node(name)
        node.start()
        via = via or self.live_members()[0]
        ring = self._membership(via, lambda: self.nodes[via].membership_change("join", name))
        self.membership_log.append(("join", name, ring.version))
        return ring

    def leave(self, name: str) -> Ring | None:
        node = self.nodes[name]
        last = len(self.members()) == 1
        ring = self._membership(name, node.leave)
        self.membership_log.append(("zero" if last else "leave", name, ring.version if ring else 0))
        self._retire(node)
        self.sim.unregister(name)
        node.shutdown()
        del self.nodes[name]
        return ring

    def _membership(self, runner: str, make: callable) -> Ring | None:
        for attempt in range(1, MEMBERSHIP_ATTEMPTS + 1):
            try:
                wire = self.sim.run_task(runner, make(), name="membership")
                return Ring.from_wire(wire) if wire else None
            except TransientError as exc:
                logger.info("membership change via %s failed (%r); retrying", runner, exc)
                self.sim.run_task(runner, _sleep(self.sim.backoff(attempt) * 10))
        raise TransientError(f"membership change via {runner} kept failing")

    def scale_to_zero(self) -> None:
        for name in list(reversed(self.members())):
            self.leave(name)

    def persist_all(self) -> list[int]:
        """Persist every dirty inode on every live member, regardless of age."""
        done = []
        for name in self.live_members():
            node = self.nodes[name]
            done += self.sim.run_task(name, node.background_flush(force=True), name="persist-all")
        return done

    def crash(self, name: str) -> None:
        if self.sim.alive(name):
            self._retire(self.nodes[name])
        self.sim.crash(name)

    def _retire(self, node: CacheNode) -> None:
        for k, v in node.txn.counters.items():
            self.retired_counters[k] = self.retired_counters.get(k, 0) + v

    def tx_counters(self) -> dict[str, int]:
        out = dict(self.retired_counters)
        for name, node in self.nodes.items():
            if self.sim.alive(name):
                for k, v in node.txn.counters.items():
                    out[k] = out.get(k, 0) + v
        return out

    def restart(self, name: str) -> None:
        self.sim.restart(name)

    # -- clients -------------------------------------------------------

    def session(self, client_id: str, mode: str = "strict"):
        from .fsops import ClientSession

        if client_id not in self.sim.endpoints:
            self.sim.register(client_id, _ClientEndpoint())
        return ClientSession(self.sim, client_id, mode, self.live_members, self.chunk_size)

    def run(self, session, gen: Generator, limit: int | None = None):
        """Run one client operation to completion."""
        return self.sim.run_task(session.id, gen, limit=limit)

    def settle(self) -> int:
        return self.sim.run()

    # -- observation ---------------------------------------------------

    def migration_records(self) -> list[tuple[str, dict]]:
        """(node dir name, body) for every MigrationReceive record ever logged, in directory order."""
        out = []
        for d in self.node_dirs:
            wal = d / "wal.log"
            if not wal.exists():
                continue
            for _, entry in iter_entries(wal.read_bytes()):
                if entry.command_id == Cmd.MIGRATION_RECEIVE:
                    out.append((d.name, entry.body()))
        return out

    def migrated_bytes(self) -> int:
        """Sum of payload bytes over every MigrationReceive record ever logged."""
        return sum(body["bytes"] for _, body in self.migration_records())

    def locks_held(self) -> dict[str, int]:
        return {n: len(node.txn.locks) for n, node in self.nodes.items() if self.sim.alive(n)}

    def open_log(self, name: str) -> RaftLog:
        return self.nodes[name].log


def _sleep(ticks: int) -> Generator:
    yield Sleep(ticks)
