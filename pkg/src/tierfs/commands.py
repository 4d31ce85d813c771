"""Registered state-machine command ids and their payload encoding.

Payloads are canonical JSON (sorted keys, no whitespace) so that identical
commands always serialize to identical bytes. Bulk data never appears in a
payload; it lives in second-level logs and is referenced by
``{"file": id, "off": offset, "len": length}``.

Top-level entries:

    TX_PREPARE_META   {txid, role, coord?, ops}   participant vote on metadata
    TX_PREPARE_CHUNK  {txid, role, coord?, ops}   participant vote on chunks only
    TX_COMMIT         {txid, role, participants?, ops?}
    TX_ABORT          {txid, role, participants?}
    STAGE_WRITE       {sid, inode, chunk, at, ref}
    MPU_BEGIN         {txid, bucket, key, upload}
    PERSISTED_INODE   {txid, inode, bucket, key, etag, ops?}
    CREATE_INODE      {meta}                      materialized from the object store
    DIR_ENTRY_ADD     {dir, entries, listed}      materialized listing
    NODE_LIST_UPDATE  {ring, ordinal?}
    MIGRATION_RECEIVE {txid, metas, dirs, chunks, bytes}

The remaining ids name sub-operations carried inside prepare/commit ``ops``
lists; each is applied when its transaction commits.
"""

from __future__ import annotations

import json
from enum import IntEnum


class Cmd(IntEnum):
    TX_PREPARE_META = 1
    TX_PREPARE_CHUNK = 2
    TX_COMMIT = 3
    TX_ABORT = 4
    STAGE_WRITE = 5
    MPU_BEGIN = 6
    PERSISTED_INODE = 7
    CLEAR_DIRTY_META = 8
    CLEAR_DIRTY_CHUNK = 9
    CREATE_INODE = 10
    DIR_ENTRY_ADD = 11
    DIR_ENTRY_REMOVE = 12
    SET_DELETED = 13
    TRUNCATE = 14
    NODE_LIST_UPDATE = 15
    MIGRATION_RECEIVE = 16
    UPDATE_META = 18
    FOLD_STAGED = 19
    LOCALIZE_CHUNK = 20
    REKEY_INODE = 21
    DROP_CHUNK = 22


REGISTERED = frozenset(int(c) for c in Cmd)


def encode_payload(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def decode_payload(data: bytes):
    return json.loads(data.decode("utf-8"))
