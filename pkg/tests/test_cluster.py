from __future__ import annotations

import pytest

from conftest import make_cluster
from tierfs.cluster import affected_nodes, compute_migration_plan, validate_version
from tierfs.errors import NodeListStale
from tierfs.ring import Ring, placement_key
from tierfs.store import DIR, FILE, Chunk, InodeMeta, NodeStore


def test_validate_version():
    ring = Ring.from_nodes(["a"], version=3)
    validate_version(3, ring)
    with pytest.raises(NodeListStale) as info:
        validate_version(2, ring)
    assert info.value.node_list["version"] == 3
    with pytest.raises(NodeListStale):
        validate_version(4, ring)
    with pytest.raises(NodeListStale):
        validate_version(1, None)


def test_migration_plan_moves_only_dirty_or_directories():
    old = Ring.from_nodes(["a"])
    new = old.with_node("b")
    cs = 1024
    store = NodeStore(cs)
    for inode in range(10, 60):
        store.metas[inode] = InodeMeta(inode, DIR if inode % 5 == 0 else FILE, dirty=inode % 2 == 0)
        store.chunks[(inode, cs)] = Chunk(inode, cs, 10, dirty=inode % 3 == 0)
    plan = compute_migration_plan("a", store, old, new)
    moving_meta = {m.inode for m in plan.dirty_metas} | {m.inode for m, _ in plan.directories}
    want_meta = {i for i in range(10, 60)
                 if new.owner(placement_key(i)) == "b" and (i % 5 == 0 or i % 2 == 0)}
    assert moving_meta == want_meta
    want_chunks = {i for i in range(10, 60) if new.owner(placement_key(i, cs, cs)) == "b" and i % 3 == 0}
    assert {c.inode for c in plan.dirty_chunks} == want_chunks
    assert set(plan.targets.values()) <= {"b"}


def test_migration_plan_empty_when_nothing_changes_owner():
    ring = Ring.from_nodes(["a", "b"])
    store = NodeStore(1024)
    store.metas[5] = InodeMeta(5, FILE, dirty=True)
    holder = ring.owner("5")
    assert compute_migration_plan(holder, store, ring, ring).empty


def test_affected_nodes():
    old = Ring(1, ((10, "A"), (20, "B"), (30, "C")))
    assert affected_nodes(old, Ring(2, old.points + ((25, "D"),))) == {"B"}
    assert affected_nodes(old, Ring(2, ((10, "A"), (30, "C")))) == {"B"}
    assert affected_nodes(old, Ring(2, ())) == {"A", "B", "C"}


def test_first_join_bootstraps_version_one(tmp_path):
    c = make_cluster(tmp_path / "c", nodes=1)
    assert c.ring.version == 1 and c.members() == ["n1"]
    assert c.migrated_bytes() == 0


def test_versions_increase_and_members_agree(tmp_path):
    c = make_cluster(tmp_path / "c", nodes=4)
    versions = [v for _, _, v in c.membership_log]
    assert versions == sorted(versions) and len(set(versions)) == len(versions)
    c.settle()
    rings = {c.nodes[n].ring for n in c.live_members()}
    assert len(rings) == 1


def test_leave_persists_dirty_files_first(tmp_path):
    c = make_cluster(tmp_path / "c", nodes=3)
    s = c.session("client")
    files = {f"/data/f{i}": bytes([i]) * (300 * i + 1) for i in range(12)}
    for p, d in files.items():
        c.run(s, s.write_path(p, d))
    leaver = max(c.members(), key=lambda n: len(c.nodes[n].store.metas))
    on_leaver = {"/data/" + m.key for m in c.nodes[leaver].store.metas.values() if m.key}
    c.leave(leaver)
    snap = c.ext.snapshot()["data"]
    for p, d in files.items():
        assert c.run(s, s.read_path(p)) == d
    assert on_leaver
    for p in on_leaver:
        assert snap[p[6:]] == files[p]


def test_stale_client_refreshes(tmp_path):
    c = make_cluster(tmp_path / "c", nodes=2)
    s = c.session("client")
    c.run(s, s.write_path("/data/f", b"v1"))
    old_version = s.ring.version
    c.join("n3")
    c.join("n4")
    assert c.run(s, s.read_path("/data/f")) == b"v1"
    assert s.ring.version > old_version
    assert s.stats["refreshes"] >= 2


def test_scale_to_zero_and_cold_start(tmp_path):
    from tierfs.cluster import Cluster

    c = make_cluster(tmp_path / "c", nodes=3)
    s = c.session("client")
    c.run(s, s.mkdir("/data/d"))
    c.run(s, s.write_path("/data/d/f", b"x" * 2500))
    c.scale_to_zero()
    assert c.members() == []
    assert c.membership_log[-1][0] == "zero"
    fresh = Cluster(tmp_path / "fresh", chunk_size=1024, ext=c.ext)
    fresh.join("m1")
    s2 = fresh.session("client")
    assert fresh.run(s2, s2.read_path("/data/d/f")) == b"x" * 2500
    assert fresh.run(s2, s2.readdir("/data")) == ["d"]


def test_crash_and_restart_preserves_data(tmp_path):
    c = make_cluster(tmp_path / "c", nodes=3)
    s = c.session("client")
    c.run(s, s.write_path("/data/f", bytes(range(256)) * 12))
    for name in c.members():
        c.crash(name)
        c.restart(name)
    c.settle()
    assert c.run(s, s.read_path("/data/f")) == bytes(range(256)) * 12
