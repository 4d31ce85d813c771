"""Which entities move when the ring changes, and their wire form."""

from __future__ import annotations

from dataclasses import dataclass, field

from .ring import Ring, placement_key
from .store import Chunk, DirTable, InodeMeta, NodeStore


@dataclass
class MigrationPlan:
    dirty_metas: list[InodeMeta] = field(default_factory=list)
    dirty_chunks: list[Chunk] = field(default_factory=list)
    directories: list[tuple[InodeMeta, DirTable]] = field(default_factory=list)
    pending: dict[tuple[int, int], dict] = field(default_factory=dict)
    targets: dict[str, str] = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return not (self.dirty_metas or self.dirty_chunks or self.directories or self.pending)

    def entity_keys(self) -> set[str]:
        keys = {placement_key(m.inode) for m in self.dirty_metas}
        keys |= {placement_key(m.inode) for m, _ in self.directories}
        keys |= {f"{c.inode}/{c.offset}" for c in self.dirty_chunks}
        keys |= {f"{i}/{o}" for i, o in self.pending}
        return keys

    def count(self) -> int:
        return len(self.dirty_metas) + len(self.directories) + len(self.dirty_chunks)


def chunk_key(inode: int, offset: int, chunk_size: int) -> str:
    return placement_key(inode, offset, chunk_size)


def affected_nodes(old: Ring, new: Ring) -> set[str]:
    """Nodes that lose part of their range between ``old`` and ``new``."""
    out = set()
    for h, _ in set(old.points) | set(new.points):
        if not old.points or not new.points:
            continue
        a, b = old.owner_of_hash(h), new.owner_of_hash(h)
        if a != b:
            out.add(a)
    if old.points and not new.points:
        out.update(old.nodes)
    return out


def compute_migration_plan(node_id: str, store: NodeStore, old: Ring, new: Ring) -> MigrationPlan:
    """Entities held by ``node_id`` whose owner changes and that are dirty or directories."""
    plan = MigrationPlan()
    cs = store.chunk_size
    for inode in sorted(store.metas):
        meta = store.metas[inode]
        key = placement_key(inode)
        target = new.owner(key)
        if target == node_id:
            continue
        if meta.is_dir:
            plan.directories.append((meta, store.dirs.get(inode, DirTable())))
        elif meta.dirty:
            plan.dirty_metas.append(meta)
        else:
            continue
        plan.targets[key] = target
    for (inode, off) in sorted(store.chunks):
        chunk = store.chunks[(inode, off)]
        key = chunk_key(inode, off, cs)
        target = new.owner(key)
        if target != node_id and chunk.dirty:
            plan.dirty_chunks.append(chunk)
            plan.targets[key] = target
    for (inode, off) in sorted(store.pending):
        key = chunk_key(inode, off, cs)
        target = new.owner(key)
        if target != node_id and store.pending[(inode, off)]:
            plan.pending[(inode, off)] = store.pending[(inode, off)]
            plan.targets[key] = target
    return plan
