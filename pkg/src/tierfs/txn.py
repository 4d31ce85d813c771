"""Two-phase commit over the node's write-ahead log.

Participants vote by durably appending a prepare record that carries the
operations to apply; commit applies them, abort discards them. Locks are
taken at prepare and released at the decision. A conflicting prepare votes
no immediately.

The coordinator is always one of the participants. Its local prepare record
carries the coordinator block (participant list, client id, sequence
numbers), its decision is logged before fan-out, and its own participant
commit is logged last, which doubles as the fan-out-complete marker.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Any, Callable, Generator

from .commands import Cmd
from .errors import Aborted, FsError, Locked, ProtocolError, RpcTimeout, TransientError
from .simnet import Call, Gather, Join, Sleep

if TYPE_CHECKING:
    from .node import CacheNode

logger = logging.getLogger(__name__)

DEDUP_WINDOW = 1024
PREPARE_RETRIES = 3


@dataclass(frozen=True, order=True)
class TxId:
    client: str
    seq: int
    txseq: int

    @property
    def key(self) -> str:
        return f"{self.client}:{self.seq}:{self.txseq}"

    def to_wire(self) -> list:
        return [self.client, self.seq, self.txseq]

    @classmethod
    def from_wire(cls, w) -> "TxId":
        return cls(w[0], w[1], w[2])


class TxState(str, Enum):
    PREPARING = "preparing"
    PREPARED = "prepared"
    COMMITTED = "committed"
    ABORTED = "aborted"

    @property
    def terminal(self) -> bool:
        return self in (TxState.COMMITTED, TxState.ABORTED)


@dataclass
class TxRecord:
    txid: TxId
    role: str
    state: TxState
    kind: str = "data"
    record: str = "meta"
    locks: list[str] = field(default_factory=list)
    ops: list = field(default_factory=list)
    coord: dict | None = None
    decision: str | None = None
    task: Any = None
    cause: Any = None


class LockTable:
    def __init__(self):
        self.holders: dict[str, str] = {}

    def available(self, resources, owner: str) -> bool:
        return all(self.holders.get(r, owner) == owner for r in resources)

    def acquire(self, resources, owner: str) -> bool:
        if not self.available(resources, owner):
            return False
        for r in resources:
            self.holders[r] = owner
        return True

    def release(self, owner: str) -> None:
        for r in [r for r, o in self.holders.items() if o == owner]:
            del self.holders[r]

    def held(self, resource: str) -> str | None:
        return self.holders.get(resource)

    def __len__(self) -> int:
        return len(self.holders)


class DedupTable:
    """Per-client window of completed transactions and their replies."""

    def __init__(self, window: int = DEDUP_WINDOW):
        self.window = window
        self.replies: dict[str, Any] = {}
        self._order: dict[str, deque] = {}
        self.highest: dict[str, int] = {}
        self.evicted: set[str] = set()

    def record(self, txid: TxId, reply: Any) -> None:
        key = txid.key
        if key not in self.replies:
            q = self._order.setdefault(txid.client, deque())
            q.append(key)
            while len(q) > self.window:
                old = q.popleft()
                self.replies.pop(old, None)
                self.evicted.add(old)
        self.replies[key] = reply
        self.highest[txid.client] = max(self.highest.get(txid.client, 0), txid.seq)

    def lookup(self, txid: TxId) -> tuple[str, Any]:
        key = txid.key
        if key in self.replies:
            return "done", self.replies[key]
        if key in self.evicted:
            return "evicted", None
        return "fresh", None


def vote_yes() -> dict:
    return {"vote": "yes"}


def vote_no(error: BaseException) -> dict:
    return {"vote": "no", "error": error}


class TxnManager:
    """Participant-side state of one node plus coordinator bookkeeping."""

    def __init__(self, node: "CacheNode"):
        self.node = node
        self.records: dict[str, TxRecord] = {}
        self.locks = LockTable()
        self.dedup = DedupTable()
        self.staged_migrations: dict[str, list[dict]] = {}
        # coordinator side
        self.txseq = 0
        self.coord_index: dict[tuple[str, int], TxId] = {}
        self.coord_tasks: dict[tuple[str, int], Any] = {}
        self.coord_outcomes: dict[tuple[str, int], Any] = {}
        self.mpu: dict[str, dict] = {}
        self.counters = {"committed": 0, "aborted": 0, "retried": 0}

    # -- ids -----------------------------------------------------------

    def next_txid(self, client: str, seq: int) -> TxId:
        self.txseq += 1
        txid = TxId(client, seq, self.txseq)
        self.coord_index[(client, seq)] = txid
        return txid

    # -- participant ---------------------------------------------------

    def holds_lock(self, resource: str) -> bool:
        return self.locks.held(resource) is not None

    def begin_prepare(self, txid: TxId, locks: list[str], ops: list, role: str, kind: str,
                      coord: dict | None, record: str = "meta") -> TxRecord:
        """Acquire locks for a new prepare; raises ``Locked`` on conflict."""
        if not self.locks.acquire(locks, txid.key):
            holder = next((self.locks.held(r) for r in locks if self.locks.held(r) not in (None, txid.key)), None)
            raise Locked(f"{txid.key} blocked by {holder}")
        rec = TxRecord(txid, role, TxState.PREPARING, kind, record, list(locks), list(ops), coord)
        self.records[txid.key] = rec
        return rec

    def finish_prepare(self, rec: TxRecord, ops: list | None = None) -> None:
        if ops is not None:
            rec.ops = ops
        cmd = Cmd.TX_PREPARE_CHUNK if rec.record == "chunk" else Cmd.TX_PREPARE_META
        body = {"txid": rec.txid.to_wire(), "role": rec.role, "kind": rec.kind, "locks": rec.locks,
                "ops": rec.ops}
        if rec.coord is not None:
            body["coord"] = rec.coord
        self.node.log.append_command(cmd, body)
        rec.state = TxState.PREPARED

    def cancel_prepare(self, rec: TxRecord, error: BaseException) -> None:
        self.locks.release(rec.txid.key)
        self.records.pop(rec.txid.key, None)
        if rec.role != "coordinator":
            # refusals are not persisted; remember them so late duplicates stay refused
            self.dedup.record(rec.txid, vote_no(error))

    def commit(self, txid: TxId, ops: list | None = None, role: str = "participant") -> dict:
        rec = self.records.get(txid.key)
        if rec is None:
            status, reply = self.dedup.lookup(txid)
            if status == "done":
                return reply
            raise ProtocolError(f"commit for unknown transaction {txid.key}")
        if rec.state is TxState.COMMITTED:
            return {"ack": "committed"}
        if rec.state is not TxState.PREPARED:
            raise ProtocolError(f"commit for {txid.key} in state {rec.state.value}")
        body = {"txid": txid.to_wire(), "role": role}
        if ops is not None:
            body["ops"] = ops
        self.node.log.append_command(Cmd.TX_COMMIT, body)
        self._apply_commit(rec, ops)
        return {"ack": "committed"}

    def _apply_commit(self, rec: TxRecord, ops: list | None) -> None:
        self.node.apply_ops(ops if ops is not None else rec.ops, rec)
        rec.state = TxState.COMMITTED
        self.locks.release(rec.txid.key)
        self.records.pop(rec.txid.key, None)
        self.dedup.record(rec.txid, {"ack": "committed"})
        self.staged_migrations.pop(rec.txid.key, None)
        self.counters["committed"] += 1

    def abort(self, txid: TxId, role: str = "participant") -> dict:
        rec = self.records.get(txid.key)
        if rec is None:
            self.staged_migrations.pop(txid.key, None)
            status, reply = self.dedup.lookup(txid)
            if status == "done" and reply.get("ack") == "committed":
                raise ProtocolError(f"abort for committed transaction {txid.key}")
            if status != "done":
                self.dedup.record(txid, {"ack": "aborted"})
            return {"ack": "aborted"}
        if rec.state is TxState.PREPARED:
            self.node.log.append_command(Cmd.TX_ABORT, {"txid": txid.to_wire(), "role": role})
        self._apply_abort(rec)
        return {"ack": "aborted"}

    def _apply_abort(self, rec: TxRecord) -> None:
        self.node.on_abort(rec)
        rec.state = TxState.ABORTED
        self.locks.release(rec.txid.key)
        self.records.pop(rec.txid.key, None)
        self.dedup.record(rec.txid, {"ack": "aborted"})
        self.staged_migrations.pop(rec.txid.key, None)
        self.counters["aborted"] += 1

    # -- replay --------------------------------------------------------

    def replay(self, cmd: Cmd, body: dict) -> None:
        if cmd in (Cmd.TX_PREPARE_META, Cmd.TX_PREPARE_CHUNK):
            txid = TxId.from_wire(body["txid"])
            record = "chunk" if cmd is Cmd.TX_PREPARE_CHUNK else "meta"
            rec = TxRecord(txid, body["role"], TxState.PREPARED, body.get("kind", "data"), record,
                           body.get("locks", []), body["ops"], body.get("coord"))
            self.records[txid.key] = rec
            if rec.coord is not None:
                self.txseq = max(self.txseq, txid.txseq)
                self.coord_index[(txid.client, txid.seq)] = txid
        elif cmd is Cmd.TX_COMMIT:
            txid = TxId.from_wire(body["txid"])
            role = body["role"]
            if role == "local":
                self.node.apply_ops(body["ops"], None)
                self.dedup.record(txid, {"ack": "committed"})
                self._note_outcome(txid, {"status": "committed"})
                return
            rec = self.records.get(txid.key)
            if role == "coordinator":
                if rec is not None:
                    rec.decision = "commit"
                return
            if rec is None:
                return
            self._apply_commit(rec, body.get("ops"))
            if rec.coord is not None:
                self._note_outcome(txid, {"status": "committed"})
        elif cmd is Cmd.TX_ABORT:
            txid = TxId.from_wire(body["txid"])
            rec = self.records.get(txid.key)
            if body["role"] == "coordinator":
                if rec is not None:
                    rec.decision = "abort"
                return
            if rec is None:
                return
            self._apply_abort(rec)
            if rec.coord is not None:
                self._note_outcome(txid, Aborted("recovered"))
        elif cmd is Cmd.MPU_BEGIN:
            self.mpu[TxId.from_wire(body["txid"]).key] = body
        elif cmd is Cmd.PERSISTED_INODE:
            txid = TxId.from_wire(body["txid"])
            if "ops" in body:  # single-record commit of a local persist
                self.node.apply_ops(body["ops"], None)
                self._note_outcome(txid, {"status": "committed", "persisted": True})
                return
            rec = self.records.get(txid.key)
            if rec is not None:
                rec.decision = "commit"
                rec.coord["persisted"] = body
        elif cmd is Cmd.MIGRATION_RECEIVE:
            self.staged_migrations.setdefault(body["txid"], []).append(body)

    def _note_outcome(self, txid: TxId, outcome) -> None:
        key = (txid.client, txid.seq)
        if self.coord_index.get(key) == txid:
            self.coord_outcomes[key] = outcome

    def incomplete(self) -> list[TxRecord]:
        return [r for r in self.records.values() if not r.state.terminal]


# -- coordinator -------------------------------------------------------


def coordinate(node: "CacheNode", txid: TxId, parts: dict[str, dict], kind: str = "data",
               commit_cmd: Cmd = Cmd.TX_COMMIT, hooks: dict | None = None) -> Generator:
    """Drive one 2PC attempt; returns ``{"status": "committed"}`` or raises.

    ``parts`` maps node id -> ``{"ops": [...], "locks": [...], "kind": str,
    "extra": {...}}``. The coordinator's own node must be present.
    """
    hooks = hooks or {}
    me = node.id
    if me not in parts:
        raise ValueError("coordinator must participate in its own transaction")
    remote = sorted(n for n in parts if n != me)
    if not remote and not hooks:
        return (yield from local_commit(node, txid, parts[me]))

    coord_block = {"participants": remote, "client": txid.client, "seq": txid.seq, "kind": kind}
    if "upload_target" in hooks:
        coord_block["upload_target"] = hooks["upload_target"]
    local = parts[me]
    vote = yield from node.prepare_local(txid, local, role="coordinator", coord=coord_block)
    if vote["vote"] != "yes":
        raise vote["error"]

    after_local = hooks.get("after_local_prepare")
    if after_local is not None:
        try:
            yield from after_local()
        except FsError as exc:
            if hooks.get("on_abort") is not None:
                hooks["on_abort"]()
            yield from decide_and_fan_out(node, txid, remote, "abort", kind)
            raise Aborted(exc) from None

    failures = yield from prepare_remote(node, txid, {n: parts[n] for n in remote})
    if not failures:
        before_decision = hooks.get("before_decision")
        if before_decision is not None:
            try:
                yield from before_decision()
            except FsError as exc:
                failures = [exc]
    if failures:
        on_abort = hooks.get("on_abort")
        if on_abort is not None:
            on_abort()
        yield from decide_and_fan_out(node, txid, remote, "abort", kind)
        cause = next((f for f in failures if isinstance(f, FsError) and f.persistent), failures[0])
        if isinstance(cause, FsError) and cause.persistent:
            raise cause
        raise Aborted(cause)
    decision_body = hooks.get("decision_body")
    yield from decide_and_fan_out(node, txid, remote, "commit", kind, commit_cmd,
                                  decision_body() if decision_body else None,
                                  hooks["local_commit_ops"]() if "local_commit_ops" in hooks else None)
    return {"status": "committed"}


def local_commit(node: "CacheNode", txid: TxId, part: dict) -> Generator:
    """All participants live on this node: one log record, no 2PC."""
    rec = node.txn.begin_prepare(txid, part.get("locks", []), part.get("ops", []), "local",
                                 part.get("kind", "data"), None)
    try:
        node.validate_ops(rec.ops, part)
        ops = yield from node.prepare_action(txid, part)
    except FsError:
        node.txn.locks.release(txid.key)
        node.txn.records.pop(txid.key, None)
        raise
    ops = rec.ops if ops is None else ops
    node.log.append_command(Cmd.TX_COMMIT, {"txid": txid.to_wire(), "role": "local", "ops": ops})
    node.txn.records.pop(txid.key, None)
    node.txn.locks.release(txid.key)
    node.apply_ops(ops, None)
    node.txn.dedup.record(txid, {"ack": "committed"})
    node.txn.counters["committed"] += 1
    return {"status": "committed"}


def prepare_remote(node: "CacheNode", txid: TxId, parts: dict[str, dict]) -> Generator:
    """Send prepares in parallel; returns the list of failures (empty = all yes)."""
    waiting = dict(parts)
    failures: list[BaseException] = []
    attempt = 0
    while waiting:
        names = sorted(waiting)
        calls = [Call(n, node.prepare_kind(waiting[n]), node.prepare_body(txid, waiting[n])) for n in names]
        results = yield Gather(calls)
        retry = {}
        for n, res in zip(names, results):
            if isinstance(res, RpcTimeout):
                retry[n] = waiting[n]
            elif isinstance(res, BaseException):
                failures.append(res)
            elif res.get("vote") != "yes":
                failures.append(res.get("error") or Aborted("vote no"))
        waiting = retry
        if waiting:
            attempt += 1
            node.sim.note_retry(txid.key)
            node.txn.counters["retried"] += 1
            if attempt > PREPARE_RETRIES:
                failures.extend(RpcTimeout(f"prepare at {n}") for n in waiting)
                break
            yield Sleep(node.sim.backoff(attempt))
    return failures


def decide_and_fan_out(node: "CacheNode", txid: TxId, remote: list[str], decision: str, kind: str,
                       commit_cmd: Cmd = Cmd.TX_COMMIT, decision_body: dict | None = None,
                       local_ops: list | None = None) -> Generator:
    body = {"txid": txid.to_wire(), "role": "coordinator", "participants": remote}
    if decision == "commit":
        if commit_cmd is Cmd.TX_COMMIT:
            node.log.append_command(Cmd.TX_COMMIT, body)
        else:
            node.log.append_command(commit_cmd, dict(decision_body or {}, txid=txid.to_wire(), participants=remote))
    else:
        node.log.append_command(Cmd.TX_ABORT, body)
    rec = node.txn.records.get(txid.key)
    if rec is not None:
        rec.decision = decision
    yield from fan_out(node, txid, remote, decision, kind)
    if decision == "commit":
        node.txn.commit(txid, local_ops)
        node.txn._note_outcome(txid, {"status": "committed"})
    else:
        node.txn.abort(txid)
        node.txn._note_outcome(txid, Aborted("aborted"))


def fan_out(node: "CacheNode", txid: TxId, remote: list[str], decision: str, kind: str) -> Generator:
    """Deliver the decision to every participant, retrying until each acks."""
    msg = node.decision_kind(kind, decision)
    waiting = list(remote)
    attempt = 0
    while waiting:
        results = yield Gather([Call(n, msg, {"txid": txid.to_wire()}) for n in waiting])
        retry = []
        for n, res in zip(waiting, results):
            if isinstance(res, TransientError):
                retry.append(n)
            elif isinstance(res, BaseException):
                logger.error("%s of %s at %s failed: %r", decision, txid.key, n, res)
                raise res
        waiting = retry
        if waiting:
            attempt += 1
            node.sim.note_retry(txid.key)
            yield Sleep(node.sim.backoff(attempt))


def resume_incomplete(node: "CacheNode") -> list[Any]:
    """Re-drive coordinator decisions after replay; returns the spawned tasks."""
    tasks = []
    for rec in sorted(node.txn.incomplete(), key=lambda r: r.txid):
        if rec.state is TxState.PREPARED:
            node.txn.locks.acquire(rec.locks, rec.txid.key)
        if rec.coord is None:
            continue
        tasks.append(node.spawn(_resume_coordinator(node, rec), name=f"resume {rec.txid.key}"))
    return tasks


def _resume_coordinator(node: "CacheNode", rec: TxRecord) -> Generator:
    remote = rec.coord["participants"]
    kind = rec.coord.get("kind", "data")
    key = (rec.txid.client, rec.txid.seq)
    node.txn.coord_tasks[key] = None
    try:
        if rec.decision == "commit":
            persisted = rec.coord.get("persisted")
            local_ops = node.persist_local_ops(persisted) if persisted else None
            yield from fan_out(node, rec.txid, remote, "commit", kind)
            node.txn.commit(rec.txid, local_ops)
            node.txn._note_outcome(rec.txid, {"status": "committed"})
            return
        mpu = node.txn.mpu.get(rec.txid.key)
        if mpu is not None and rec.decision is None:
            node.abort_upload(mpu["upload"])
        elif rec.decision is None and rec.coord.get("upload_target"):
            # the crash may have hit between mpu_begin and logging its upload id
            bucket, obj = rec.coord["upload_target"]
            for upload in node.ext.list_uploads(bucket, obj):
                node.abort_upload(upload)
        if rec.decision is None:
            node.log.append_command(Cmd.TX_ABORT, {"txid": rec.txid.to_wire(), "role": "coordinator",
                                                   "participants": remote})
            rec.decision = "abort"
        yield from fan_out(node, rec.txid, remote, "abort", kind)
        node.txn.abort(rec.txid)
        node.txn._note_outcome(rec.txid, Aborted("coordinator restarted"))
    finally:
        node.txn.coord_tasks.pop(key, None)


def run_coordinated(node: "CacheNode", client: str, seq: int,
                    body: Callable[[], Generator]) -> Generator:
    """Deduplicate a client request by (client, seq) and run it once."""
    key = (client, seq)
    if key in node.txn.coord_outcomes:
        outcome = node.txn.coord_outcomes[key]
        if isinstance(outcome, BaseException):
            raise outcome
        return outcome
    task = node.txn.coord_tasks.get(key)
    if task is not None:
        result = yield Join(task)
        return result
    if key in node.txn.coord_tasks:
        # a recovered coordinator is still resolving this request
        while key in node.txn.coord_tasks:
            yield Sleep(5)
        return (yield from run_coordinated(node, client, seq, body))
    task = node.spawn(_record_outcome(node, key, body()), name=f"coord {client}:{seq}")
    node.txn.coord_tasks[key] = task
    return (yield Join(task))


def _record_outcome(node: "CacheNode", key, gen: Generator) -> Generator:
    try:
        result = yield from gen
    except FsError as exc:
        if exc.persistent:
            # transient failures left no effect, so a retry may run the request again
            node.txn.coord_outcomes[key] = exc
        raise
    finally:
        node.txn.coord_tasks.pop(key, None)
    node.txn.coord_outcomes[key] = result
    return result
