from __future__ import annotations

import pytest

from tierfs.errors import ExternalError, NotFound
from tierfs.extstore import Fault, ObjectStore, PreconditionFailed


@pytest.fixture
def store():
    return ObjectStore(["b"])


def test_put_get_and_range(store):
    data = bytes(range(256)) * 256
    store.put_object("b", "k", data)
    assert store.get_range("b", "k", 0, 65536) == data
    assert store.get_object("b", "k") == data
    assert store.head_object("b", "k")[0] == len(data)


def test_range_slice_oracle(store):
    third = 16
    data = b"a" * third + b"b" * third + b"c" * third
    store.put_object("b", "k", data)
    assert store.get_range("b", "k", third, third) == data[third:2 * third]
    assert store.get_range("b", "k", 40, 100) == data[40:]


def test_missing_key_and_bucket(store):
    with pytest.raises(NotFound):
        store.get_object("b", "nope")
    with pytest.raises(NotFound):
        store.get_range("b", "nope", 0, 1)
    with pytest.raises(NotFound):
        store.put_object("other", "k", b"")


def test_second_put_wins_and_changes_etag(store):
    e1 = store.put_object("b", "k", b"one")
    e2 = store.put_object("b", "k", b"one")
    assert store.get_object("b", "k") == b"one"
    assert e1 != e2
    store.put_object("b", "k", b"two")
    assert store.get_object("b", "k") == b"two"


def test_list_prefix_collapses_delimiter(store):
    for k in ("a/b/c.txt", "a/d.txt", "top", "a/b/e"):
        store.put_object("b", k, b"")
    assert store.list_prefix("b", "a/") == (["a/d.txt"], ["a/b/"])
    assert store.list_prefix("b", "") == (["top"], ["a/"])
    assert ObjectStore(["e"]).list_prefix("e", "") == ([], [])


def test_multipart_commit_orders_parts(store):
    up = store.mpu_begin("b", "k")
    store.mpu_add(up, 2, b"world")
    store.mpu_add(up, 1, b"hello ")
    with pytest.raises(NotFound):
        store.get_object("b", "k")
    assert store.list_prefix("b", "") == ([], [])
    store.mpu_commit(up, [1, 2])
    assert store.get_object("b", "k") == b"hello world"
    assert not store.pending


def test_multipart_duplicate_part_last_wins(store):
    up = store.mpu_begin("b", "k")
    store.mpu_add(up, 1, b"a")
    store.mpu_add(up, 2, b"old")
    store.mpu_add(up, 2, b"new")
    store.mpu_commit(up, [1, 2])
    assert store.get_object("b", "k") == b"anew"


def test_multipart_abort_leaves_nothing(store):
    up = store.mpu_begin("b", "k")
    store.mpu_add(up, 1, b"x")
    store.mpu_abort(up)
    with pytest.raises(NotFound):
        store.get_object("b", "k")
    with pytest.raises(NotFound):
        store.mpu_commit(up, [1])


def test_multipart_missing_part(store):
    up = store.mpu_begin("b", "k")
    store.mpu_add(up, 1, b"x")
    with pytest.raises(PreconditionFailed):
        store.mpu_commit(up, [1, 2])
    assert up in store.pending


def test_list_uploads_only_exact_key(store):
    u1 = store.mpu_begin("b", "k")
    store.mpu_begin("b", "k2")
    u3 = store.mpu_begin("b", "k")
    assert store.list_uploads("b", "k") == [u1, u3]


def test_conditional_delete(store):
    etag = store.put_object("b", "k", b"v")
    store.mutate_out_of_band("b", "k", b"w")
    with pytest.raises(PreconditionFailed):
        store.delete_object("b", "k", if_match=etag)
    store.delete_object("b", "k", if_match=store.head_object("b", "k")[1])
    store.delete_object("b", "k")
    assert store.snapshot() == {"b": {}}


def test_call_log_and_faults(store):
    store.faults.append(Fault("put_object", ordinal=2))
    store.put_object("b", "k", b"1")
    with pytest.raises(ExternalError):
        store.put_object("b", "k", b"2")
    store.put_object("b", "k", b"3")
    assert store.count("put_object") == 3
    assert store.get_object("b", "k") == b"3"
    store.mutate_out_of_band("b", "x", b"")
    assert [op for op, _ in store.call_log] == ["put_object"] * 3 + ["get_object"]


def test_fail_n_fault(store):
    store.faults.append(Fault("get_object", ordinal=1, action="fail-n", count=2))
    store.put_object("b", "k", b"v")
    for _ in range(2):
        with pytest.raises(ExternalError):
            store.get_object("b", "k")
    assert store.get_object("b", "k") == b"v"


def test_dump(store, tmp_path):
    store.put_object("b", "dir/file", b"v")
    store.dump(tmp_path)
    assert (tmp_path / "b" / "dir%2Ffile").read_bytes() == b"v"
