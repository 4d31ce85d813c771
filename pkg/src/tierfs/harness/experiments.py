"""Reusable experiment drivers behind the acceptance suite.

Each function builds its own cluster in ``root``, runs a seeded workload and
returns plain data (outcomes, histories, findings) for the caller to judge.
"""

from __future__ import annotations

import random
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from ..cluster import Cluster
from ..errors import FsError
from ..history import Event, check_close_to_open, check_read_after_write
from ..refmodel import RefFS
from ..simnet import FaultPlan, MessageFault, Sim


def _fresh(root: Path) -> Path:
    if root.exists():
        shutil.rmtree(root)
    return root


def make_cluster(root: Path, nodes: int = 3, chunk_size: int = 1024, seed: int = 0, jitter: int = 0,
                 faults: FaultPlan | None = None) -> Cluster:
    sim = Sim(seed, jitter=jitter, faults=faults)
    c = Cluster(_fresh(root), chunk_size=chunk_size, sim=sim)
    for i in range(nodes):
        c.join(f"n{i + 1}")
    return c


# -- racy writes -------------------------------------------------------


def racy_write_trial(root: Path, seed: int, chunk_size: int = 1024) -> str:
    """Two clients write different 2-chunk payloads over the same range at once.

    Returns "a", "b" or "mixed" for what a read sees after quiescence.
    """
    c = make_cluster(root, 3, chunk_size, seed=seed, jitter=4)
    setup = c.session("setup")
    c.run(setup, setup.mkdir("/data/r"))
    path = "/data/r/f"
    c.run(setup, setup.write_path(path, b"\0" * 2 * chunk_size))
    a, b = bytes([0xAA]) * 2 * chunk_size, bytes([0xBB]) * 2 * chunk_size
    sa, sb = c.session("ca"), c.session("cb")
    rng = random.Random(seed)

    def writer(s, data, delay):
        from ..simnet import Sleep

        yield Sleep(delay)
        yield from s.write_path(path, data)

    ta = c.sim.spawn("ca", writer(sa, a, rng.randint(0, 6)))
    tb = c.sim.spawn("cb", writer(sb, b, rng.randint(0, 6)))
    c.settle()
    for t in (ta, tb):
        if t.error is not None:
            raise t.error
    got = c.run(setup, setup.read_path(path))
    return "a" if got == a else "b" if got == b else "mixed"


# -- consistency histories ---------------------------------------------


@dataclass
class HistoryRun:
    history: list[Event] = field(default_factory=list)
    findings: list[str] = field(default_factory=list)
    ops: int = 0
    errors: int = 0
    flush_tx: int = 0
    writes: int = 0


SLOT = 256


def strict_history(root: Path, seed: int = 0, clients: int = 3, ops_per_client: int = 500,
                   files: int = 3, chunk_size: int = 1024) -> HistoryRun:
    """Concurrent strict-mode clients writing and reading fixed slots; checked for read-after-write."""
    from ..simnet import Sleep

    c = make_cluster(root, 3, chunk_size, seed=seed, jitter=3)
    setup = c.session("setup")
    c.run(setup, setup.mkdir("/data/h"))
    slots_per_file = chunk_size * 2 // SLOT
    paths = [f"/data/h/f{i}" for i in range(files)]
    for p in paths:
        c.run(setup, setup.write_path(p, b"\0" * SLOT * slots_per_file))
    out = HistoryRun()
    initial = b"\0" * SLOT

    def client(idx: int):
        s = sessions[idx]
        rng = random.Random(seed * 1000 + idx)
        handles = {}
        for p in paths:
            handles[p] = yield from s.open(p, "r+")
        for n in range(ops_per_client):
            p = rng.choice(paths)
            slot = rng.randrange(slots_per_file)
            start = c.sim.now
            try:
                if rng.random() < 0.5:
                    value = f"c{idx}-{n}-".encode().ljust(SLOT, b".")
                    yield from s.write(handles[p], slot * SLOT, value)
                    kind = "w"
                else:
                    value = yield from s.read(handles[p], slot * SLOT, SLOT)
                    kind = "r"
            except FsError:
                out.errors += 1
                continue
            out.history.append(Event(s.id, kind, (p, slot), value, start, c.sim.now))
            out.ops += 1
            yield Sleep(rng.randint(0, 3))

    sessions = [c.session(f"c{i}", "strict") for i in range(clients)]
    tasks = [c.sim.spawn(s.id, client(i)) for i, s in enumerate(sessions)]
    c.settle()
    for t in tasks:
        if t.error is not None:
            raise t.error
    out.findings = check_read_after_write(out.history, initial)
    return out


def weak_history(root: Path, seed: int = 0, rounds: int = 40, readers: int = 2,
                 chunk_size: int = 1024) -> HistoryRun:
    """One weak-mode writer session per file opens, rewrites slots, closes; readers open-read-close."""
    from ..simnet import Sleep

    c = make_cluster(root, 3, chunk_size, seed=seed, jitter=3)
    setup = c.session("setup")
    c.run(setup, setup.mkdir("/data/w"))
    paths = ["/data/w/a", "/data/w/b"]
    slots = 4
    for p in paths:
        c.run(setup, setup.write_path(p, b"\0" * SLOT * slots))
    out = HistoryRun()
    writes: list[Event] = []

    def writer(s, path: str, rng: random.Random):
        for n in range(rounds):
            fh = yield from s.open(path, "w")
            touched = []
            for slot in sorted(rng.sample(range(slots), rng.randint(1, slots))):
                value = f"{s.id}-{n}-{slot}-".encode().ljust(SLOT, b"~")
                yield from s.write(fh, slot * SLOT, value)
                touched.append((slot, value))
            yield from s.close(fh)
            for slot, value in touched:
                writes.append(Event(s.id, "w", (path, slot), value, c.sim.now, c.sim.now))
            yield Sleep(rng.randint(0, 5))

    def reader(s, rng: random.Random):
        for _ in range(rounds):
            path = rng.choice(paths)
            opened = c.sim.now
            fh = yield from s.open(path, "r")
            data = yield from s.read(fh, 0, SLOT * slots)
            yield from s.close(fh)
            for slot in range(slots):
                out.history.append(Event(s.id, "r", (path, slot), data[slot * SLOT:(slot + 1) * SLOT],
                                         opened, c.sim.now))
            yield Sleep(rng.randint(0, 5))

    tasks = []
    for i, p in enumerate(paths):
        s = c.session(f"w{i}", "weak")
        tasks.append(c.sim.spawn(s.id, writer(s, p, random.Random(seed * 100 + i))))
    for i in range(readers):
        s = c.session(f"r{i}", "weak")
        tasks.append(c.sim.spawn(s.id, reader(s, random.Random(seed * 100 + 50 + i))))
    c.settle()
    for t in tasks:
        if t.error is not None:
            raise t.error
    out.history += writes
    out.ops = len(out.history)
    out.findings = check_close_to_open(out.history, b"\0" * SLOT)
    return out


def weak_batching(root: Path, writes: int = 16, size: int = 8 * 1024) -> HistoryRun:
    """A weak session writes ``writes`` sequential blocks then closes; count flush transactions."""
    c = make_cluster(root, 3, 64 * 1024)
    s = c.session("weak", "weak")
    c.run(s, s.mkdir("/data/b"))
    fh = c.run(s, s.open("/data/b/f", "w", create=True))
    before = s.stats["flush_tx"]
    for i in range(writes):
        c.run(s, s.write(fh, i * size, bytes([i % 251]) * size))
    c.run(s, s.close(fh))
    out = HistoryRun(writes=writes, flush_tx=s.stats["flush_tx"] - before)
    reader = c.session("reader")
    data = c.run(reader, reader.read_path("/data/b/f"))
    expected = b"".join(bytes([i % 251]) * size for i in range(writes))
    if data != expected:
        out.findings.append("weak writes not visible after close")
    return out


# -- upload path selection -------------------------------------------

MPU_OPS = ("mpu_begin", "mpu_add", "mpu_commit", "mpu_abort")


def fsync_store_calls(root: Path, size: int, chunk_size: int = 1024) -> dict[str, int]:
    """fsync one freshly written file of ``size`` bytes; count the store calls it made."""
    c = make_cluster(root, 3, chunk_size)
    s = c.session("client")
    c.run(s, s.write_path("/data/obj", bytes([7]) * size))
    fh = c.run(s, s.open("/data/obj", "r"))
    before = len(c.ext.call_log)
    c.run(s, s.fsync(fh))
    c.run(s, s.close(fh))
    counts: dict[str, int] = {}
    for op, _ in c.ext.call_log[before:]:
        counts[op] = counts.get(op, 0) + 1
    if c.ext.get_object("data", "obj") != bytes([7]) * size:
        counts["content_mismatch"] = 1
    return counts


# -- duplicate delivery ------------------------------------------------


def duplicate_run(root: Path, duplicate: bool, seed: int = 0) -> tuple[list, dict, list[str]]:
    """A mixed workload; returns (per-op replies, store snapshot, final file contents)."""
    faults = FaultPlan()
    if duplicate:
        faults.messages += [MessageFault("duplicate"), MessageFault("duplicate", responses=True)]
    c = make_cluster(root, 3, 1024, seed=seed, faults=faults)
    s = c.session("client")
    replies = []

    def record(label, gen):
        try:
            value = c.run(s, gen)
        except FsError as exc:
            value = f"error {type(exc).__name__}"
        if hasattr(value, "inode"):
            value = {"fd": value.fd, "inode": value.inode}
        replies.append((label, value))

    record("mkdir", s.mkdir("/data/x"))
    record("mkdir2", s.mkdir("/data/x/y"))
    for i in range(6):
        record(f"write{i}", s.write_path(f"/data/x/f{i}", bytes([65 + i]) * (500 + 900 * i)))
    record("overwrite", s.write_path("/data/x/f2", b"z" * 700, 300))
    record("rename", s.rename("/data/x/f1", "/data/x/y/g"))
    record("unlink", s.unlink("/data/x/f0"))
    record("truncate", s.truncate_path("/data/x/f3", 1500))
    record("missing", s.unlink("/data/x/nope"))
    fh = c.run(s, s.open("/data/x/f4", "r"))
    record("fsync", s.fsync(fh))
    record("close", s.close(fh))
    record("readdir", s.readdir("/data/x"))
    for path in ("/data/x/f2", "/data/x/f3", "/data/x/f4", "/data/x/y/g"):
        record(f"read {path}", s.read_path(path))
    c.persist_all()
    c.settle()
    contents = [c.run(s, s.read_path(p)) for p in ("/data/x/f2", "/data/x/f3", "/data/x/f5", "/data/x/y/g")]
    return replies, c.ext.snapshot(), contents


# -- reference-model equivalence ---------------------------------------


OPS = ("create", "write", "write", "write", "read", "truncate", "unlink", "mkdir", "rename", "readdir")


def random_trace(seed: int, length: int = 60) -> list[tuple]:
    rng = random.Random(seed)
    names = ["a", "b", "c", "d"]
    dirs = ["/data", "/data/d1", "/data/d2", "/data/d1/e"]
    trace = []
    for _ in range(length):
        op = rng.choice(OPS)
        path = f"{rng.choice(dirs)}/{rng.choice(names)}"
        if op == "write":
            off = rng.choice([0, rng.randrange(0, 3000)])
            trace.append((op, path, off, rng.randbytes(rng.randint(1, 2500))))
        elif op == "read":
            trace.append((op, path, rng.randrange(0, 2000), rng.randint(0, 3000)))
        elif op == "truncate":
            trace.append((op, path, rng.randint(0, 4000)))
        elif op == "mkdir":
            trace.append((op, rng.choice(dirs[1:])))
        elif op == "rename":
            trace.append((op, path, f"{rng.choice(dirs)}/{rng.choice(names)}"))
        elif op == "readdir":
            trace.append((op, rng.choice(dirs)))
        else:
            trace.append((op, path))
    return trace


def _apply(target, op: tuple, cluster=None, session=None):
    """Run one trace op against the reference model (cluster None) or a cluster session."""
    name, path, *args = op
    if cluster is None:
        ref: RefFS = target
        if name == "create":
            return ref.create(path)
        if name == "write":
            ref.create(path)
            return ref.write(path, args[0], args[1])
        if name == "read":
            return ref.read(path, args[0], args[1])
        if name == "truncate":
            return ref.truncate(path, args[0])
        if name == "unlink":
            return ref.unlink(path)
        if name == "mkdir":
            return ref.mkdir(path)
        if name == "rename":
            return ref.rename(path, args[0])
        return ref.readdir(path)
    s = session
    run = cluster.run
    if name == "create":
        fh = run(s, s.open(path, "w", create=True))
        run(s, s.close(fh))
        return None
    if name == "write":
        run(s, s.write_path(path, args[1], args[0]))
        return None
    if name == "read":
        fh = run(s, s.open(path, "r"))
        data = run(s, s.read(fh, args[0], args[1]))
        run(s, s.close(fh))
        return data
    if name == "truncate":
        run(s, s.truncate_path(path, args[0]))
        return None
    if name == "unlink":
        run(s, s.unlink(path))
        return None
    if name == "mkdir":
        run(s, s.mkdir(path))
        return None
    if name == "rename":
        run(s, s.rename(path, args[0]))
        return None
    return run(s, s.readdir(path))


def _outcome(fn):
    try:
        return ("ok", fn())
    except FsError as exc:
        return ("error", type(exc).__name__)


def oracle_trial(root: Path, seed: int, length: int = 60) -> list[str]:
    """Replay one random trace against a cluster and the reference model; return differences."""
    c = make_cluster(root, 3, 1024, seed=seed)
    s = c.session("client")
    ref = RefFS()
    findings = []
    for i, op in enumerate(random_trace(seed, length)):
        want = _outcome(lambda: _apply(ref, op))
        got = _outcome(lambda: _apply(None, op, c, s))
        if want != got:
            findings.append(f"seed {seed} op {i} {op[0]} {op[1]}: cluster {got[0]} {_short(got[1])}, "
                            f"reference {want[0]} {_short(want[1])}")
    for path, data in sorted(ref.files().items()):
        got = _outcome(lambda: c.run(s, s.read_path(path)))
        if got != ("ok", data):
            findings.append(f"seed {seed} final {path}: content differs")
    for path in ref.dirs():
        got = _outcome(lambda: c.run(s, s.readdir(path)))
        if got != ("ok", ref.readdir(path)):
            findings.append(f"seed {seed} final listing {path} differs: {got} vs {ref.readdir(path)}")
    return findings


def _short(v) -> str:
    if isinstance(v, bytes):
        return f"<{len(v)} bytes>"
    return repr(v)
