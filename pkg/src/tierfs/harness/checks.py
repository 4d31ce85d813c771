"""Oracle checks: cluster content, object-store content, and migration sets.

Each check returns a list of human-readable findings; an empty list passes.
The migration oracle recomputes the expected moved set by brute force over
every entity held anywhere in the cluster, independently of the plan code
the nodes themselves run.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import FsError
from ..extstore import ObjectStore
from ..refmodel import RefFS
from ..ring import Ring, placement_key


@dataclass(frozen=True)
class Entity:
    kind: str  # "meta", "chunk" or "pending"
    inode: int
    offset: int = 0

    def key(self, chunk_size: int) -> str:
        if self.kind == "meta":
            return placement_key(self.inode)
        return placement_key(self.inode, self.offset, chunk_size)


def snapshot_entities(cluster) -> dict[Entity, dict]:
    """Every entity on every live member: holder, dirtiness, directory flag, payload bytes."""
    out: dict[Entity, dict] = {}
    for name in cluster.live_members():
        store = cluster.nodes[name].store
        for inode, meta in store.metas.items():
            out[Entity("meta", inode)] = {"holder": name, "dirty": meta.dirty, "dir": meta.is_dir, "bytes": 0}
        for (inode, off), chunk in store.chunks.items():
            out[Entity("chunk", inode, off)] = {"holder": name, "dirty": chunk.dirty, "dir": False,
                                                "bytes": chunk.sl_bytes()}
        for (inode, off), staged in store.pending.items():
            if staged:
                out[Entity("pending", inode, off)] = {
                    "holder": name, "dirty": True, "dir": False,
                    "bytes": sum(p.sl.length for p in staged.values() if p.sl is not None)}
    return out


def expected_moves(entities: dict[Entity, dict], old: Ring, new: Ring, chunk_size: int,
                   leaving: str | None = None) -> tuple[set[Entity], int]:
    """Entities whose owner changes and that are dirty or directories, plus their payload bytes."""
    moved, total = set(), 0
    for ent, info in entities.items():
        key = ent.key(chunk_size)
        if info["holder"] != old.owner(key):
            continue
        if new.points and old.owner(key) == new.owner(key):
            continue
        if info["dirty"] or info["dir"]:
            moved.add(ent)
            total += info["bytes"]
    return moved, total


def received_entities(bodies: list[dict]) -> tuple[set[Entity], int, list[str]]:
    """Entities named in MigrationReceive records, their byte total, and clean-data findings."""
    got, total, findings = set(), 0, []
    for b in bodies:
        total += b["bytes"]
        dirs = {inode for inode, _, _ in b["dirs"]}
        for m in b["metas"]:
            got.add(Entity("meta", m["inode"]))
            if not m["dirty"] and m["inode"] not in dirs and m["kind"] != "dir":
                findings.append(f"clean metadata of inode {m['inode']} was migrated")
        for c in b["chunks"]:
            got.add(Entity("chunk", c["inode"], c["offset"]))
            if not c["dirty"]:
                findings.append(f"clean chunk {c['inode']}/{c['offset']} was migrated")
        for inode, off, *_ in b["pending"]:
            got.add(Entity("pending", inode, off))
    return got, total, findings


def check_migration(expected: set[Entity], expected_bytes: int, bodies: list[dict]) -> list[str]:
    got, total, findings = received_entities(bodies)
    for ent in sorted(expected - got, key=repr)[:10]:
        findings.append(f"expected migration of {ent} did not happen")
    for ent in sorted(got - expected, key=repr)[:10]:
        findings.append(f"unexpected migration of {ent}")
    if total != expected_bytes:
        findings.append(f"migrated {total} payload bytes, expected {expected_bytes}")
    return findings


def check_content(cluster, ref: RefFS, session=None, listings: bool = True) -> list[str]:
    """Every reference file reads back byte-identical; every directory lists identically."""
    s = session or cluster.session("checker")
    findings = []
    for path, data in sorted(ref.files().items()):
        try:
            got = cluster.run(s, s.read_path(path))
        except FsError as exc:
            findings.append(f"{path}: read failed with {exc!r}")
            continue
        if got != data:
            findings.append(f"{path}: content differs ({len(got)} bytes vs {len(data)})")
    if listings:
        for path in ref.dirs():
            try:
                got = cluster.run(s, s.readdir(path))
            except FsError as exc:
                findings.append(f"{path}: readdir failed with {exc!r}")
                continue
            if got != ref.readdir(path):
                findings.append(f"{path}: listing differs")
    return findings


def check_store(ext: ObjectStore, ref: RefFS) -> list[str]:
    """The object store holds exactly the reference tree: files as objects, directories as 'key/'."""
    findings = []
    snap = ext.snapshot()
    expected: dict[tuple[str, str], bytes] = {}
    for path, data in ref.files().items():
        bucket, _, key = path[1:].partition("/")
        expected[(bucket, key)] = data
    for path in ref.dirs():
        bucket, _, key = path[1:].partition("/")
        if key:
            expected[(bucket, key + "/")] = b""
    actual = {(b, k): v for b, objs in snap.items() for k, v in objs.items()}
    for bk in sorted(set(expected) - set(actual))[:10]:
        findings.append(f"object {bk[0]}/{bk[1]} missing from the store")
    for bk in sorted(set(actual) - set(expected))[:10]:
        findings.append(f"unexpected object {bk[0]}/{bk[1]} in the store")
    for bk in sorted(set(actual) & set(expected)):
        if actual[bk] != expected[bk]:
            findings.append(f"object {bk[0]}/{bk[1]} differs from the reference")
    return findings


def check_oracle(cluster, ref: RefFS, ext: ObjectStore | None = None, migrations=None) -> list[str]:
    """Run the content, store and migration checks that apply; the store check needs a persisted cluster."""
    findings = check_content(cluster, ref) if cluster.live_members() else []
    if ext is not None:
        findings += check_store(ext, ref)
    for expected, expected_bytes, bodies in migrations or []:
        findings += check_migration(expected, expected_bytes, bodies)
    return findings
