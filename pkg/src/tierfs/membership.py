"""Node side of membership changes.

A join or leave runs as one transaction coordinated by the owner of the
reserved membership key under the current ring. Every member votes; nodes
that lose part of their range stop accepting writes, wait for in-flight
transactions, and push their dirty entities and directories to the new
owners before voting yes. The receivers log what they got and install it
only when the new ring commits.
"""

from __future__ import annotations

import logging
from typing import TYPE_CHECKING, Generator

from .commands import Cmd
from .errors import FsError, NodeListStale, ReadOnly, RpcTimeout, TransientError
from .migration import affected_nodes, compute_migration_plan
from .raftlog import SecondLevelRef
from .ring import MEMBERSHIP_KEY, Ring, placement_key
from .simnet import Call, Sleep
from .store import Chunk, DirTable, InodeMeta, Piece
from .txn import TxId, coordinate, run_coordinated

if TYPE_CHECKING:
    from .node import CacheNode

logger = logging.getLogger(__name__)

DRAIN_TICKS = 20_000
LEAVE_ROUNDS = 20
MEMBERSHIP_TIMEOUT = 5_000


class MembershipOps:
    """Mixin for :class:`tierfs.node.CacheNode`."""

    # -- coordinator ---------------------------------------------------

    def _h_JoinRequest(self: "CacheNode", src, b):
        return self.membership_change("join", b["node"])

    def _h_LeaveRequest(self: "CacheNode", src, b):
        return self.membership_change("leave", b["node"])

    def membership_change(self: "CacheNode", action: str, node_id: str) -> Generator:
        coord = self.owner(MEMBERSHIP_KEY)
        if coord != self.id:
            kind = "JoinRequest" if action == "join" else "LeaveRequest"
            return (yield Call(coord, kind, {"node": node_id}, timeout=MEMBERSHIP_TIMEOUT))
        while self.membership_busy:
            yield Sleep(5)
        self.membership_busy = True
        try:
            old = self.ring
            if action == "join":
                if node_id in old:
                    return old.to_wire()
                new = old.with_node(node_id)
            else:
                if node_id not in old:
                    return old.to_wire()
                new = old.without_node(node_id)
            seq = self.next_internal_seq()
            txid = self.txn.next_txid(self.client_id, seq)
            update = [int(Cmd.NODE_LIST_UPDATE), {"ring": new.to_wire()}]
            parts = {
                n: {"kind": "membership", "ops": [update], "locks": [], "checks": [], "record": "meta",
                    "action": "membership", "extra": {"old": old.to_wire()}}
                for n in sorted(set(old.nodes) | set(new.nodes))
            }
            yield from coordinate(self, txid, parts, kind="membership")
            return new.to_wire()
        finally:
            self.membership_busy = False

    # -- participant ---------------------------------------------------

    def _membership_action(self: "CacheNode", txid: TxId, part: dict) -> Generator:
        old = Ring.from_wire(part["extra"]["old"])
        new = Ring.from_wire(part["ops"][0][1]["ring"])
        if self.ring is not None and self.ring.version != old.version:
            raise NodeListStale(self.ring.to_wire())
        if self.id not in affected_nodes(old, new):
            return None
        self.frozen = True
        try:
            yield from self._drain(txid.key)
            plan = compute_migration_plan(self.id, self.store, old, new)
            for target, payload in sorted(self._plan_payloads(plan).items()):
                yield from self.rpc(target, "MigratePush", dict(payload, txid=txid.key, src=self.id),
                                    retry_on=(RpcTimeout,))
        except FsError:
            self.frozen = False
            raise
        return None

    def _drain(self: "CacheNode", own: str | None) -> Generator:
        """Wait until no other transaction holds a lock here."""
        deadline = self.sim.now + DRAIN_TICKS
        while any(holder != own for holder in self.txn.locks.holders.values()):
            if self.sim.now > deadline:
                raise ReadOnly(f"{self.id} could not drain in-flight transactions")
            yield Sleep(2)

    def _plan_payloads(self: "CacheNode", plan) -> dict[str, dict]:
        cs = self.chunk_size
        out: dict[str, dict] = {}

        def payload(target: str) -> dict:
            return out.setdefault(target, {"metas": [], "dirs": [], "chunks": [], "pending": []})

        for meta in plan.dirty_metas:
            payload(plan.targets[placement_key(meta.inode)])["metas"].append(meta.to_wire())
        for meta, table in plan.directories:
            p = payload(plan.targets[placement_key(meta.inode)])
            p["metas"].append(meta.to_wire())
            p["dirs"].append([meta.inode, table.to_wire(), sorted(self.store.conflicts.get(meta.inode, ()))])
        for chunk in plan.dirty_chunks:
            wire = chunk.to_wire()
            wire["pieces"] = [self._piece_payload(p) for p in chunk.pieces]
            payload(plan.targets[placement_key(chunk.inode, chunk.offset, cs)])["chunks"].append(wire)
        for (inode, off), staged in sorted(plan.pending.items()):
            target = plan.targets[placement_key(inode, off, cs)]
            for sid in sorted(staged):
                piece = staged[sid]
                payload(target)["pending"].append([inode, off, sid, piece.at, self.log.read_second_level(piece.sl)])
        return out

    def _piece_payload(self: "CacheNode", piece: Piece) -> dict:
        if piece.sl is None:
            return piece.to_wire()
        return {"at": piece.at, "len": piece.length, "data": self.log.read_second_level(piece.sl)}

    def _h_MigratePush(self: "CacheNode", src, b):
        key = b["txid"]
        if any(r["src"] == b["src"] for r in self.txn.staged_migrations.get(key, [])):
            return {"ok": True}
        moved = 0
        chunks = []
        for c in b["chunks"]:
            pieces = []
            for p in c["pieces"]:
                if "data" in p:
                    ref = self.log.append_second_level(p["data"]) if p["data"] else SecondLevelRef(0, 0, 0)
                    moved += len(p["data"])
                    p = {"at": p["at"], "len": p["len"], "sl": ref.to_wire()}
                pieces.append(p)
            chunks.append(dict(c, pieces=pieces))
        pending = []
        for inode, off, sid, at, data in b["pending"]:
            ref = self.log.append_second_level(data)
            moved += len(data)
            pending.append([inode, off, sid, at, ref.to_wire()])
        body = {"txid": key, "src": b["src"], "metas": b["metas"], "dirs": b["dirs"], "chunks": chunks,
                "pending": pending, "bytes": moved}
        self.log.append_command(Cmd.MIGRATION_RECEIVE, body)
        self.txn.staged_migrations.setdefault(key, []).append(body)
        return {"ok": True}

    def _install_migration(self: "CacheNode", body: dict) -> None:
        store = self.store
        for wire in body["metas"]:
            meta = InodeMeta.from_wire(wire)
            store.metas[meta.inode] = meta
        for inode, rows, conflicts in body["dirs"]:
            store.dirs[inode] = DirTable.from_wire(rows)
            if conflicts:
                store.conflicts[inode] = set(conflicts)
        for wire in body["chunks"]:
            chunk = Chunk.from_wire(wire)
            store.chunks[(chunk.inode, chunk.offset)] = chunk
        for inode, off, sid, at, ref in body["pending"]:
            store.stage(sid, inode, off, at, SecondLevelRef.from_wire(ref))
        self.migrated_in["entities"] += len(body["metas"]) + len(body["chunks"])
        self.migrated_in["bytes"] += body["bytes"]

    # -- leaving -------------------------------------------------------

    def dirty_inodes(self: "CacheNode") -> tuple[list[int], list[int]]:
        """(dirty inodes whose metadata is here, inodes with dirty chunks whose metadata is elsewhere)."""
        local = sorted(m.inode for m in self.store.dirty_metas())
        remote = sorted({c.inode for c in self.store.chunks.values() if c.dirty} - set(self.store.metas))
        return local, remote

    def leave(self: "CacheNode") -> Generator:
        """Persist everything dirty, then hand directories to the remaining members."""
        self.leaving = True
        for _ in range(LEAVE_ROUNDS):
            yield from self._drain(None)
            local, remote = self.dirty_inodes()
            if not local and not remote:
                break
            for inode in local:
                seq = self.next_internal_seq()
                try:
                    yield from run_coordinated(self, self.client_id, seq,
                                               lambda i=inode, s=seq: self.op_persist(self.client_id, s, {"inode": i}))
                except TransientError as exc:
                    logger.info("leave: persist of %s on %s failed: %r", inode, self.id, exc)
            for inode in remote:
                owner = self.owner(placement_key(inode))
                body = {"client": self.client_id, "seq": self.next_internal_seq(), "op": "persist",
                        "args": {"inode": inode}}
                try:
                    yield from self.rpc(owner, "TxRequest", body, retry_on=(RpcTimeout,),
                                        timeout=MEMBERSHIP_TIMEOUT)
                except TransientError as exc:
                    logger.info("leave: remote persist of %s failed: %r", inode, exc)
        else:
            raise ReadOnly(f"{self.id} could not persist its dirty data")
        if len(self.ring) == 1:
            self.left = True
            return None
        coord = self.owner(MEMBERSHIP_KEY)
        if coord == self.id:
            return (yield from self.membership_change("leave", self.id))
        return (yield Call(coord, "LeaveRequest", {"node": self.id}, timeout=MEMBERSHIP_TIMEOUT))
