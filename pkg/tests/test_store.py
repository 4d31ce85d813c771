from __future__ import annotations

from hypothesis import given, settings
from hypothesis import strategies as st

from tierfs.raftlog import SecondLevelRef
from tierfs.store import DIR, FILE, DirTable, InodeMeta, Piece, inode_ordinal, make_inode_id, split_range

MiB = 1024 * 1024


def test_split_range_single_chunk():
    assert split_range(0, 8192, 16 * MiB) == [(0, 0, 8192)]


def test_split_range_at_boundary():
    start = 16 * MiB - 4096
    assert split_range(start, MiB, 16 * MiB) == [(0, start, 4096), (16 * MiB, 0, MiB - 4096)]


@settings(max_examples=200, deadline=None)
@given(offset=st.integers(0, 10**7), length=st.integers(0, 10**6), cs=st.sampled_from([512, 1000, 4096, 65536]))
def test_split_range_tiles_the_request(offset, length, cs):
    parts = split_range(offset, length, cs)
    pos = offset
    for chunk, intra, n in parts:
        assert chunk % cs == 0 and 0 <= intra < cs and 0 < n <= cs - intra
        assert chunk + intra == pos
        pos += n
    assert pos == offset + length


def test_dir_table_round_trip_is_sorted_and_deterministic():
    a = DirTable({"b": (7, FILE), "a": (9, DIR), "ü": (3, FILE)})
    b = DirTable({"ü": (3, FILE), "a": (9, DIR), "b": (7, FILE)})
    assert a.serialize() == b.serialize()
    back = DirTable.deserialize(a.serialize())
    assert back.entries == a.entries
    assert back.names() == ["a", "b", "ü"]
    assert DirTable.from_wire(a.to_wire()).entries == a.entries


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), st.tuples(st.integers(0, 2**63), st.sampled_from([FILE, DIR])),
                       max_size=20))
def test_dir_table_serialization_round_trip(entries):
    t = DirTable(entries)
    assert DirTable.deserialize(t.serialize()).entries == entries


def test_piece_clipping():
    p = Piece(100, 50, SecondLevelRef(1, 1000, 50))
    assert p.clipped(200) is p
    assert p.clipped(100) is None
    cut = p.clipped(120)
    assert (cut.at, cut.length, cut.sl) == (100, 20, SecondLevelRef(1, 1000, 20))
    ext = Piece(0, 10, None, "b", "k", 5)
    assert Piece.from_wire(ext.to_wire()) == ext
    assert Piece.from_wire(p.to_wire()) == p


def test_inode_ids_carry_the_allocating_ordinal():
    inode = make_inode_id(3, 12345)
    assert inode_ordinal(inode) == 3
    assert make_inode_id(3, 1) != make_inode_id(4, 1)


def test_meta_wire_round_trip():
    m = InodeMeta(5, FILE, size=10, dirty=True, bucket="data", key="a/b")
    assert InodeMeta.from_wire(m.to_wire()) == m
    assert m.ext_binding() is None
    m.ext_key, m.ext_len, m.ext_etag = "a/b", 10, "e"
    assert m.ext_binding() == {"bucket": "data", "key": "a/b", "len": 10, "etag": "e"}
