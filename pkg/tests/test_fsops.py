from __future__ import annotations

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import make_cluster
from tierfs.errors import BadHandle, Exists, IsADirectory, NotADirectory, NotEmpty, NotFound, PermissionDenied, UsageError
from tierfs.fsops import longest_run, parent_and_name, split_path
from tierfs.harness.experiments import oracle_trial


def test_path_helpers():
    assert split_path("/data/a//b") == ["data", "a", "b"]
    assert parent_and_name("/data/a/b") == ("/data/a", "b")
    with pytest.raises(UsageError):
        split_path("data/a")
    with pytest.raises(UsageError):
        split_path("/data/../a")
    with pytest.raises(UsageError):
        parent_and_name("/")


def test_longest_run():
    assert longest_run([]) == 0
    assert longest_run([(0, b"a" * 10), (10, b"b" * 5), (100, b"c" * 12)]) == 15
    assert longest_run([(5, b"x" * 10), (0, b"y" * 8)]) == 15


def test_write_then_read(cluster, session):
    c, s = cluster, session
    c.run(s, s.mkdir("/data/d"))
    data = bytes(range(256)) * 10
    c.run(s, s.write_path("/data/d/f", data))
    assert c.run(s, s.read_path("/data/d/f")) == data
    assert c.run(s, s.stat("/data/d/f")).size == len(data)
    other = c.session("other")
    assert c.run(other, other.read_path("/data/d/f")) == data


def test_lookup_missing(cluster, session):
    with pytest.raises(NotFound):
        cluster.run(session, session.lookup("/data/nope"))
    with pytest.raises(NotFound):
        cluster.run(session, session.lookup("/nobucket"))


def test_closed_handle_rejected(cluster, session):
    c, s = cluster, session
    fh = c.run(s, s.open("/data/f", "w", create=True))
    c.run(s, s.close(fh))
    with pytest.raises(BadHandle):
        c.run(s, s.close(fh))
    with pytest.raises(BadHandle):
        c.run(s, s.write(fh, 0, b"x"))
    with pytest.raises(BadHandle):
        c.run(s, s.read(fh, 0, 1))


def test_read_only_handle_refuses_writes(cluster, session):
    c, s = cluster, session
    c.run(s, s.write_path("/data/f", b"abc"))
    fh = c.run(s, s.open("/data/f", "r"))
    with pytest.raises(BadHandle):
        c.run(s, s.write(fh, 0, b"x"))


def test_sparse_write_reads_zeros(cluster, session):
    c, s = cluster, session
    c.run(s, s.write_path("/data/f", b"end", 5000))
    data = c.run(s, s.read_path("/data/f"))
    assert data == b"\0" * 5000 + b"end"


def test_overwrite_across_chunks(cluster, session):
    c, s = cluster, session
    c.run(s, s.write_path("/data/f", b"a" * 4000))
    c.run(s, s.write_path("/data/f", b"b" * 1500, 900))
    assert c.run(s, s.read_path("/data/f")) == b"a" * 900 + b"b" * 1500 + b"a" * 1600


def test_truncate_shrinks_and_extends(cluster, session):
    c, s = cluster, session
    c.run(s, s.write_path("/data/f", bytes(range(200)) * 20))
    c.run(s, s.truncate_path("/data/f", 1500))
    assert c.run(s, s.read_path("/data/f")) == (bytes(range(200)) * 20)[:1500]
    c.run(s, s.truncate_path("/data/f", 2500))
    assert c.run(s, s.read_path("/data/f")) == (bytes(range(200)) * 20)[:1500] + b"\0" * 1000
    fh = c.run(s, s.open("/data/f", "w", truncate=True))
    c.run(s, s.close(fh))
    assert c.run(s, s.read_path("/data/f")) == b""


def test_namespace_errors(cluster, session):
    c, s = cluster, session
    c.run(s, s.mkdir("/data/d"))
    c.run(s, s.write_path("/data/d/f", b"x"))
    with pytest.raises(Exists):
        c.run(s, s.mkdir("/data/d"))
    with pytest.raises(Exists):
        c.run(s, s.open("/data/d/f", "w", create=True, exclusive=True))
    with pytest.raises(NotEmpty):
        c.run(s, s.rmdir("/data/d"))
    with pytest.raises(IsADirectory):
        c.run(s, s.open("/data/d", "w"))
    with pytest.raises(NotADirectory):
        c.run(s, s.readdir("/data/d/f"))
    with pytest.raises(NotADirectory):
        c.run(s, s.lookup("/data/d/f/g"))
    with pytest.raises(PermissionDenied):
        c.run(s, s.mkdir("/newbucket"))
    with pytest.raises(NotFound):
        c.run(s, s.unlink("/data/d/nope"))


def test_mkdir_visible_to_other_clients(cluster, session):
    c, s = cluster, session
    c.run(s, s.mkdir("/data/d"))
    other = c.session("other")
    assert c.run(other, other.readdir("/data")) == ["d"]


def test_unlink_then_read(cluster, session):
    c, s = cluster, session
    c.run(s, s.write_path("/data/f", b"x"))
    c.run(s, s.unlink("/data/f"))
    with pytest.raises(NotFound):
        c.run(s, s.read_path("/data/f"))
    assert c.run(s, s.readdir("/data")) == []


def test_rename_file_and_directory(cluster, session):
    c, s = cluster, session
    for d in ("/data/a", "/data/b", "/data/a/sub"):
        c.run(s, s.mkdir(d))
    c.run(s, s.write_path("/data/a/f", b"hello"))
    c.run(s, s.write_path("/data/a/sub/g", b"deep"))
    c.run(s, s.rename("/data/a/f", "/data/b/f2"))
    assert c.run(s, s.read_path("/data/b/f2")) == b"hello"
    c.run(s, s.rename("/data/a/sub", "/data/b/sub"))
    assert c.run(s, s.read_path("/data/b/sub/g")) == b"deep"
    assert c.run(s, s.readdir("/data/a")) == []
    assert c.run(s, s.readdir("/data/b")) == ["f2", "sub"]


def test_read_of_cached_chunks_makes_no_store_calls(cluster, session):
    c, s = cluster, session
    c.run(s, s.write_path("/data/f", b"q" * 3000))
    before = len(c.ext.call_log)
    assert c.run(s, s.read_path("/data/f")) == b"q" * 3000
    assert len(c.ext.call_log) == before


def test_existing_objects_are_visible(tmp_path):
    from tierfs.extstore import ObjectStore

    ext = ObjectStore(["data"])
    ext.put_object("data", "dir/file", b"z" * 2500)
    ext.put_object("data", "top", b"t")
    c = make_cluster(tmp_path / "c", ext=ext)
    s = c.session("client")
    assert c.run(s, s.readdir("/data")) == ["dir", "top"]
    assert c.run(s, s.read_path("/data/dir/file")) == b"z" * 2500
    # overwrite the middle: the base fill still comes from the store
    c.run(s, s.write_path("/data/dir/file", b"m" * 100, 1000))
    assert c.run(s, s.read_path("/data/dir/file")) == b"z" * 1000 + b"m" * 100 + b"z" * 1400


def test_fsync_of_clean_file_makes_no_store_calls(cluster, session):
    c, s = cluster, session
    c.run(s, s.write_path("/data/f", b"x" * 100))
    fh = c.run(s, s.open("/data/f", "r"))
    c.run(s, s.fsync(fh))
    assert c.ext.get_object("data", "f") == b"x" * 100
    before = len(c.ext.call_log)
    c.run(s, s.fsync(fh))
    assert len(c.ext.call_log) == before


def test_background_flush_respects_interval(tmp_path):
    c = make_cluster(tmp_path / "c", flush_interval=1000)
    s = c.session("client")
    c.run(s, s.write_path("/data/young", b"y"))
    c.sim.run(until=c.sim.now + 100)
    assert "young" not in c.ext.snapshot()["data"]
    c.sim.run(until=c.sim.now + 3000)
    assert c.ext.snapshot()["data"]["young"] == b"y"


def test_weak_mode_buffers_until_close(cluster):
    c = cluster
    w = c.session("w", "weak")
    fh = c.run(w, w.open("/data/f", "w", create=True))
    c.run(w, w.write(fh, 0, b"abc"))
    assert c.run(w, w.read(fh, 0, 3)) == b"abc"
    r = c.session("r")
    assert c.run(r, r.read_path("/data/f")) == b""
    c.run(w, w.close(fh))
    assert c.run(r, r.read_path("/data/f")) == b"abc"
    assert w.stats["flush_tx"] == 1


def test_unknown_mode_rejected(cluster):
    with pytest.raises(UsageError):
        cluster.session("x", "eventual")


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seed=st.integers(1000, 10**6))
def test_random_traces_match_reference(tmp_path, seed):
    assert oracle_trial(tmp_path / "oracle", seed, length=40) == []
