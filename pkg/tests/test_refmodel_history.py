from __future__ import annotations

import pytest

from tierfs.errors import Exists, IsADirectory, NotADirectory, NotEmpty, NotFound, PermissionDenied, UsageError
from tierfs.history import Event, check_close_to_open, check_read_after_write
from tierfs.refmodel import RefFS


def test_reference_model_basics():
    ref = RefFS()
    ref.mkdir("/data/d")
    ref.create("/data/d/f")
    ref.write("/data/d/f", 3, b"abc")
    assert ref.read("/data/d/f") == b"\0\0\0abc"
    assert ref.read("/data/d/f", 4, 10) == b"bc"
    ref.truncate("/data/d/f", 2)
    assert ref.size("/data/d/f") == 2
    assert ref.readdir("/data") == ["d"]
    ref.rename("/data/d", "/data/e")
    assert ref.files() == {"/data/e/f": b"\0\0"}
    assert sorted(ref.dirs()) == ["/", "/data", "/data/e"]


def test_reference_model_errors():
    ref = RefFS()
    ref.mkdir("/data/d")
    ref.create("/data/d/f")
    with pytest.raises(Exists):
        ref.mkdir("/data/d")
    with pytest.raises(Exists):
        ref.create("/data/d/f", exclusive=True)
    with pytest.raises(NotEmpty):
        ref.rmdir("/data/d")
    with pytest.raises(IsADirectory):
        ref.write("/data/d", 0, b"x")
    with pytest.raises(NotADirectory):
        ref.create("/data/d/f/g")
    with pytest.raises(NotFound):
        ref.unlink("/data/nope")
    with pytest.raises(PermissionDenied):
        ref.mkdir("/other")
    with pytest.raises(UsageError):
        ref.rename("/data/d", "/data/d/sub")


def ev(client, kind, value, start, end, slot=("f", 0)):
    return Event(client, kind, slot, value, start, end)


def test_linearizable_history_passes():
    h = [ev("a", "w", b"1", 0, 5), ev("b", "r", b"1", 6, 8), ev("a", "w", b"2", 7, 12),
         ev("b", "r", b"1", 9, 10), ev("c", "r", b"2", 11, 13), ev("c", "r", b"2", 14, 15)]
    assert check_read_after_write(h, b"0") == []


@pytest.mark.parametrize("history,needle", [
    ([ev("a", "w", b"1", 0, 5), ev("b", "r", b"0", 6, 7)], "missed a completed write"),
    ([ev("a", "w", b"1", 0, 2), ev("a", "w", b"2", 3, 4), ev("b", "r", b"1", 5, 6)], "overwritten"),
    ([ev("b", "r", b"1", 0, 1), ev("a", "w", b"1", 5, 6)], "future"),
    ([ev("b", "r", b"?", 0, 1)], "nobody wrote"),
    ([ev("a", "w", b"1", 0, 10), ev("a", "w", b"2", 11, 20), ev("b", "r", b"2", 12, 21),
      ev("c", "r", b"1", 22, 23)], "overwritten"),
    ([ev("a", "w", b"1", 0, 2), ev("a", "w", b"2", 3, 30), ev("b", "r", b"2", 4, 5),
      ev("c", "r", b"1", 6, 7)], "back in time"),
])
def test_bad_histories_are_flagged(history, needle):
    findings = check_read_after_write(history, b"0")
    assert any(needle in f for f in findings), findings


def test_slots_are_independent():
    h = [ev("a", "w", b"1", 0, 2, slot=("f", 0)), ev("b", "r", b"0", 5, 6, slot=("f", 1))]
    assert check_read_after_write(h, b"0") == []


def test_close_to_open():
    good = [ev("w", "w", b"1", 10, 10), ev("r", "r", b"1", 11, 12), ev("r", "r", b"0", 5, 9)]
    assert check_close_to_open(good, b"0") == []
    stale = [ev("w", "w", b"1", 10, 10), ev("r", "r", b"0", 11, 12)]
    assert "missed" in check_close_to_open(stale, b"0")[0]
    # a reader that opened before the close may see either version
    assert check_close_to_open([ev("w", "w", b"1", 10, 10), ev("r", "r", b"0", 10, 12)], b"0") == []
    assert "nobody" in check_close_to_open([ev("r", "r", b"x", 1, 2)], b"0")[0]
