from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tierfs.commands import REGISTERED, Cmd, encode_payload
from tierfs.crc import crc32c
from tierfs.errors import ChecksumError, CorruptionError
from tierfs.raftlog import AppendError, LogEntry, RaftLog, SecondLevelRef, iter_entries, verify, verify_dir


def crc32c_bitwise(data: bytes) -> int:
    """Independent bit-at-a-time CRC-32C."""
    crc = 0xFFFFFFFF
    for byte in data:
        crc ^= byte
        for _ in range(8):
            crc = (crc >> 1) ^ (0x82F63B78 & -(crc & 1))
    return crc ^ 0xFFFFFFFF


# term(8) | command id(2) | payload length(4) | crc32c(4) | payload, little-endian.
ENTRY_1 = bytes.fromhex(
    "0100000000000000"  # term 1
    "0500"  # STAGE_WRITE
    "07000000"  # 7 payload bytes
    "de2762ae"  # checksum
) + b'{"a":1}'
ENTRY_2 = bytes.fromhex(
    "0100000000000000"
    "0300"  # TX_COMMIT
    "12000000"  # 18 payload bytes
    "21c30a44"
) + b'{"txid":["c",1,1]}'
FIXTURE = ENTRY_1 + ENTRY_2


def test_crc32c_check_value():
    assert crc32c(b"123456789") == 0xE3069283
    assert crc32c_bitwise(b"123456789") == 0xE3069283


@settings(max_examples=100, deadline=None)
@given(st.binary(max_size=300))
def test_crc32c_matches_bitwise(data):
    assert crc32c(data) == crc32c_bitwise(data)


def test_fixture_checksums_are_independent():
    for raw in (ENTRY_1, ENTRY_2):
        assert int.from_bytes(raw[14:18], "little") == crc32c_bitwise(raw[:14] + raw[18:])


def test_fixture_decodes():
    entries = list(iter_entries(FIXTURE))
    assert [i for i, _ in entries] == [1, 2]
    first, second = entries[0][1], entries[1][1]
    assert (first.term, first.command(), first.body()) == (1, Cmd.STAGE_WRITE, {"a": 1})
    assert (second.term, second.command(), second.body()) == (1, Cmd.TX_COMMIT, {"txid": ["c", 1, 1]})
    assert first.encode() + second.encode() == FIXTURE


def test_two_appends_match_fixture(tmp_path):
    log = RaftLog(tmp_path)
    assert log.append_command(Cmd.STAGE_WRITE, {"a": 1}) == 1
    assert log.append_command(Cmd.TX_COMMIT, {"txid": ["c", 1, 1]}) == 2
    log.close()
    assert (tmp_path / "wal.log").read_bytes() == FIXTURE


def test_every_single_bit_flip_is_detected(tmp_path):
    for pos in range(len(FIXTURE)):
        for bit in range(8):
            bad = bytearray(FIXTURE)
            bad[pos] ^= 1 << bit
            expected = 1 if pos < len(ENTRY_1) else 2
            assert verify(bytes(bad)) is not None, (pos, bit)
            # a flip in entry 1 may change its length field and spill into entry 2
            assert verify(bytes(bad)) <= expected


def test_bit_flip_halts_replay(tmp_path):
    log = RaftLog(tmp_path)
    log.append_command(Cmd.STAGE_WRITE, {"a": 1})
    log.append_command(Cmd.TX_COMMIT, {"txid": ["c", 1, 1]})
    log.close()
    wal = tmp_path / "wal.log"
    data = bytearray(wal.read_bytes())
    data[len(ENTRY_1) + 20] ^= 0x10
    wal.write_bytes(bytes(data))
    applied = []
    reopened = RaftLog(tmp_path)
    with pytest.raises(ChecksumError) as info:
        reopened.replay(lambda i, e: applied.append(i))
    assert info.value.index == 2
    assert applied == [1]
    assert verify_dir(tmp_path) == (1, 2)


def test_verify_pristine_and_truncated():
    assert verify(FIXTURE) is None
    assert verify(b"") is None
    for cut in (len(FIXTURE) - 1, len(ENTRY_1) + 10, len(ENTRY_1) + 18):
        assert verify(FIXTURE[:cut]) == 2
    with pytest.raises(CorruptionError):
        list(iter_entries(FIXTURE[:-1]))


def test_flipped_checksum_field():
    bad = bytearray(FIXTURE)
    bad[len(ENTRY_1) + 14] ^= 0xFF
    assert verify(bytes(bad)) == 2


def test_unregistered_command_rejected(tmp_path):
    assert 17 not in REGISTERED
    log = RaftLog(tmp_path)
    with pytest.raises(AppendError):
        log.append(LogEntry(1, 17, b"{}"))
    forged = LogEntry(1, 17, b"{}").encode()
    assert verify(forged) == 1


def test_empty_log_replays_nothing(tmp_path):
    log = RaftLog(tmp_path)
    assert log.replay(lambda i, e: None) == 0


def test_replay_after_reopen_applies_each_entry_once(tmp_path):
    log = RaftLog(tmp_path)
    for i in range(5):
        log.append_command(Cmd.UPDATE_META, {"i": i})
    log.close()
    seen = []
    again = RaftLog(tmp_path)
    assert again.replay(lambda i, e: seen.append(e.body()["i"])) == 5
    assert seen == [0, 1, 2, 3, 4]
    assert again.append_command(Cmd.UPDATE_META, {"i": 5}) == 6


def test_second_level_round_trip_and_offsets(tmp_path):
    log = RaftLog(tmp_path)
    one = log.append_second_level(b"x")
    big = log.append_second_level(bytes(range(256)) * 1024)
    assert log.read_second_level(one) == b"x"
    assert big.file_id == one.file_id
    assert big.offset >= one.offset + one.length
    assert log.read_second_level(big) == bytes(range(256)) * 1024
    log.close()
    reopened = RaftLog(tmp_path)
    assert reopened.read_second_level(big) == bytes(range(256)) * 1024
    assert SecondLevelRef.from_wire(big.to_wire()) == big


def test_second_level_rollover(tmp_path):
    log = RaftLog(tmp_path, rollover=100)
    a = log.append_second_level(b"a" * 80)
    b = log.append_second_level(b"b" * 80)
    assert b.file_id == a.file_id + 1 and b.offset == 0
    assert log.read_second_level(a) == b"a" * 80


def test_second_level_bad_refs(tmp_path):
    log = RaftLog(tmp_path)
    ref = log.append_second_level(b"abc")
    with pytest.raises(CorruptionError):
        log.read_second_level(SecondLevelRef(ref.file_id, 2, 5))
    with pytest.raises(CorruptionError):
        log.read_second_level(SecondLevelRef(99, 0, 1))
    with pytest.raises(ValueError):
        log.append_second_level(b"")


def test_durable_hook_brackets_writes(tmp_path):
    events = []
    log = RaftLog(tmp_path, on_durable=lambda phase, label: events.append((phase, label)))
    log.append_command(Cmd.TX_ABORT, {})
    log.append_second_level(b"z")
    assert events == [("before", "TX_ABORT"), ("after", "TX_ABORT"),
                      ("before", "SECOND_LEVEL"), ("after", "SECOND_LEVEL")]


def test_closed_log_refuses_appends(tmp_path):
    log = RaftLog(tmp_path)
    log.close()
    with pytest.raises(AppendError):
        log.append_command(Cmd.TX_ABORT, {})


payloads = st.recursive(
    st.none() | st.booleans() | st.integers(-2**40, 2**40) | st.text(max_size=10),
    lambda inner: st.lists(inner, max_size=4) | st.dictionaries(st.text(max_size=5), inner, max_size=4),
    max_leaves=10,
)


@settings(max_examples=150, deadline=None)
@given(term=st.integers(0, 2**64 - 1), cmd=st.sampled_from(sorted(REGISTERED)), body=payloads)
def test_entry_round_trip(term, cmd, body):
    entry = LogEntry(term, cmd, encode_payload(body))
    raw = entry.encode()
    decoded, end = LogEntry.decode(raw)
    assert end == len(raw)
    assert (decoded.term, decoded.command_id, decoded.payload) == (term, cmd, entry.payload)
    assert decoded.encode() == raw
    assert decoded.body() == body


@settings(max_examples=60, deadline=None)
@given(bodies=st.lists(payloads, min_size=1, max_size=5), data=st.data())
def test_any_single_bit_flip_detected(bodies, data):
    raw = b"".join(LogEntry(1, int(Cmd.UPDATE_META), encode_payload(b)).encode() for b in bodies)
    pos = data.draw(st.integers(0, len(raw) - 1))
    bit = data.draw(st.integers(0, 7))
    bad = bytearray(raw)
    bad[pos] ^= 1 << bit
    assert verify(bytes(bad)) is not None
