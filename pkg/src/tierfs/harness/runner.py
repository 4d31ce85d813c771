"""Execute a scenario: build the cluster, run the workload and schedule, check oracles."""

from __future__ import annotations

import logging
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from ..cluster import Cluster
from ..commands import Cmd
from ..extstore import ObjectStore
from ..raftlog import iter_entries
from ..refmodel import RefFS
from .checks import check_content, check_migration, check_store, expected_moves, snapshot_entities
from .scenario import Scenario
from .sweep import fsync_crash_sweep
from .workload import apply_to_cluster, apply_to_ref, gen_workload

logger = logging.getLogger(__name__)


@dataclass
class Report:
    scenario: str
    metrics: dict[str, int | str] = field(default_factory=dict)
    findings: list[str] = field(default_factory=list)
    checks: dict[str, bool] = field(default_factory=dict)
    trace: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings and all(self.checks.values())

    def metrics_text(self) -> str:
        lines = [f"{k} {v}" for k, v in sorted(self.metrics.items())]
        lines += [f"check.{k} {'pass' if v else 'fail'}" for k, v in sorted(self.checks.items())]
        return "\n".join(lines) + "\n"


class ScenarioRun:
    def __init__(self, sc: Scenario, workdir: Path):
        self.sc = sc
        self.workdir = workdir
        self.ext = ObjectStore(sc.buckets)
        self.report = Report(sc.name)
        self.ref = RefFS(sc.buckets)
        self.generation = 0
        self.cluster = self._fresh_cluster()
        self.names = 0
        self.migrated_entities = 0
        self.traces: list[str] = []

    def _fresh_cluster(self) -> Cluster:
        self.generation += 1
        return Cluster(self.workdir / f"gen{self.generation}", buckets=self.sc.buckets,
                       chunk_size=self.sc.chunk_size, flush_interval=self.sc.flush_interval or None,
                       seed=self.sc.seed + self.generation - 1, ext=self.ext)

    def _name(self) -> str:
        self.names += 1
        return f"n{self.names:02d}"

    def phase(self, name: str, fn) -> None:
        start = self.cluster.sim.now
        fn()
        self.report.metrics[f"ticks.{name}"] = self.report.metrics.get(f"ticks.{name}", 0) + (
            self.cluster.sim.now - start)

    def finding(self, check: str, items: list[str]) -> None:
        self.report.checks[check] = self.report.checks.get(check, True) and not items
        self.report.findings += [f"{check}: {f}" for f in items]

    # -- membership with oracle ----------------------------------------

    def _membership(self, action: str) -> None:
        c = self.cluster
        old = c.ring
        before = snapshot_entities(c) if old is not None else {}
        seen = Counter(d for d, _ in c.migration_records())
        if action == "join":
            c.join(self._name())
        else:
            members = c.members()
            # leave the highest-numbered member; deterministic and exercises every position
            c.leave(sorted(members)[-1])
        new = c.ring
        if "migration" in self.sc.checks and old is not None and new is not None:
            leaving = None if action == "join" else next(iter(set(old.nodes) - set(new.nodes)))
            if leaving is not None:
                # the leaver persists first; whatever is still dirty or a directory moves
                before = {e: dict(i, dirty=False) if i["holder"] == leaving and not i["dir"] else i
                          for e, i in before.items()}
            expected, expected_bytes = expected_moves(before, old, new, self.sc.chunk_size)
            bodies = _new_records(c.migration_records(), seen)
            self.migrated_entities += len(expected)
            self.finding("migration", check_migration(expected, expected_bytes, bodies))
            if leaving is not None:
                self.finding("migration", self._leaver_persisted(before, leaving))
        if "reachability" in self.sc.checks:
            if c.live_members():
                self.finding("reachability", check_content(c, self.ref, listings=False))

    def _leaver_persisted(self, before, leaving: str) -> list[str]:
        """Every file with state on the leaver must now match the reference in the store."""
        inodes = {e.inode for e, i in before.items() if i["holder"] == leaving}
        snap = self.ext.snapshot()
        out = []
        for path, data in sorted(self.ref.files().items()):
            bucket, _, key = path[1:].partition("/")
            if self._inodes.get(path) in inodes and snap.get(bucket, {}).get(key) != data:
                out.append(f"{path}: data held by {leaving} not in the store after leave")
        return out

    # -- steps ---------------------------------------------------------

    def run(self) -> Report:
        sc = self.sc
        m = self.report.metrics
        self.phase("build", lambda: [self.cluster.join(self._name()) for _ in range(sc.nodes)])
        ops = gen_workload(sc.workload, sc.seed)
        self.traces += [o.line() for o in ops]
        apply_to_ref(self.ref, ops)
        self.phase("workload", lambda: apply_to_cluster(self.cluster, ops, sc.mode))
        self._inodes = self._index_inodes()
        m["workload.files"] = sc.workload.files
        m["workload.bytes"] = sum(len(o.payload) for o in ops)
        for action, args in sc.steps:
            self._step(action, args)
        if "content" in sc.checks and self.cluster.live_members():
            self.phase("check", lambda: self.finding("content", check_content(self.cluster, self.ref)))
        if "store" in sc.checks:
            self.finding("store", check_store(self.ext, self.ref))
        for check in sc.checks:
            self.report.checks.setdefault(check, True)
        self._metrics()
        self.report.trace = self.traces + self.cluster.sim.trace
        return self.report

    def _index_inodes(self) -> dict[str, int]:
        out = {}
        for node in self.cluster.nodes.values():
            for meta in node.store.metas.values():
                if not meta.deleted:
                    out["/" + meta.bucket + "/" + meta.key] = meta.inode
        return out

    def _step(self, action: str, args: list[str]) -> None:
        c = self.cluster
        if action == "join":
            for _ in range(int(args[0])):
                self.phase("join", lambda: self._membership("join"))
        elif action == "leave":
            for _ in range(int(args[0])):
                self.phase("leave", lambda: self._membership("leave"))
        elif action == "scale_to_zero":
            def zero():
                while len(c.live_members()) > 1:
                    self._membership("leave")
                last = c.live_members()[0]
                mark, entries = len(c.sim.trace), c.nodes[last].log.last_index
                self._membership("leave")
                # no membership transaction: no membership messages, no membership records
                kinds = {f"req:{k}" for k in MEMBERSHIP_MESSAGES}
                m = self.report.metrics
                m["zero.final_membership_messages"] = sum(
                    1 for line in c.sim.trace[mark:] if line.split()[1] in kinds)
                m["zero.final_membership_records"] = _membership_records(c.node_dirs, last, entries)
            self.phase("scale_to_zero", zero)
        elif action == "persist_all":
            self.phase("persist", c.persist_all)
        elif action == "advance":
            self.phase("advance", lambda: c.sim.run(until=c.sim.now + int(args[0])))
        elif action == "cold_start":
            self._retire_cluster()
            self.cluster = self._fresh_cluster()
            self.phase("cold_start", lambda: [self.cluster.join(self._name()) for _ in range(int(args[0]))])
            if "roundtrip" in self.sc.checks:
                self.finding("roundtrip", check_content(self.cluster, self.ref))
        elif action == "crash_sweep":
            if args[0] != "fsync":
                raise ValueError(f"unknown crash sweep target {args[0]}")
            result = fsync_crash_sweep(self.workdir / "sweep", self.sc, chunk_size=self.sc.chunk_size)
            self.report.metrics["sweep.points"] = result.points
            self.report.metrics["sweep.duplicate_upload_points"] = len(result.duplicate_points)
            if "atomicity" in self.sc.checks:
                self.finding("atomicity", result.findings)
            if "duplicate_upload" in self.sc.checks:
                self.finding("duplicate_upload", result.duplicate_findings)
        else:  # pragma: no cover - rejected by the parser
            raise ValueError(action)

    def _retire_cluster(self) -> None:
        self._accumulate()
        for name in list(self.cluster.nodes):
            if self.cluster.sim.alive(name):
                self.cluster.sim.unregister(name)
                self.cluster.nodes[name].shutdown()

    def _accumulate(self) -> None:
        m = self.report.metrics
        c = self.cluster
        for k, v in c.tx_counters().items():
            m[f"tx.{k}"] = m.get(f"tx.{k}", 0) + v
        m["migrated.bytes"] = m.get("migrated.bytes", 0) + c.migrated_bytes()
        recs = c.migration_records()
        m["migrated.entities"] = m.get("migrated.entities", 0) + sum(
            len(b["metas"]) + len(b["chunks"]) + len(b["pending"]) for _, b in recs)
        m["migrated.records"] = m.get("migrated.records", 0) + len(recs)
        m["sim.events"] = m.get("sim.events", 0) + c.sim.executed
        m["sim.retries"] = m.get("sim.retries", 0) + c.sim.total_retries

    def _metrics(self) -> None:
        self._accumulate()
        for op, n in sorted(Counter(op for op, _ in self.ext.call_log).items()):
            self.report.metrics[f"ext.{op}"] = n
        self.report.metrics["nodes.started"] = self.names
        if "migration" in self.sc.checks:
            self.report.metrics["migration.expected_entities"] = self.migrated_entities


MEMBERSHIP_MESSAGES = ("RingCheck", "JoinRequest", "LeaveRequest")


def _membership_records(node_dirs: list[Path], node: str, skip: int) -> int:
    """Log entries after the first ``skip`` in ``node``'s log that belong to a membership transaction."""
    wal = next(d for d in reversed(node_dirs) if d.name.endswith(f"-{node}")) / "wal.log"
    count = 0
    for index, entry in iter_entries(wal.read_bytes()):
        if index > skip and (entry.command_id == Cmd.NODE_LIST_UPDATE or entry.body().get("kind") == "membership"):
            count += 1
    return count


def _new_records(records: list[tuple[str, dict]], seen: Counter) -> list[dict]:
    """Records beyond the first ``seen[dir]`` ones of each node directory."""
    count: Counter = Counter()
    out = []
    for d, body in records:
        count[d] += 1
        if count[d] > seen[d]:
            out.append(body)
    return out


def run_scenario(sc: Scenario, seed: int | None = None, workdir: str | Path | None = None) -> Report:
    if seed is not None:
        sc.seed = seed
    if workdir is None:
        with tempfile.TemporaryDirectory(prefix="tierfs-") as tmp:
            return ScenarioRun(sc, Path(tmp)).run()
    return ScenarioRun(sc, Path(workdir)).run()
