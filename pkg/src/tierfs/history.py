"""Client-history checkers for the two consistency modes.

Histories are lists of :class:`Event` with simulator start/end ticks. Every
write stores a value unique to that write, so a read's value identifies the
write it observed. Each slot is checked as an independent register.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass


@dataclass(frozen=True)
class Event:
    client: str
    kind: str  # "w" write, "r" read, "open", "close"
    slot: tuple
    value: bytes | None
    start: int
    end: int


def _by_slot(history: list[Event]) -> dict[tuple, list[Event]]:
    out: dict[tuple, list[Event]] = defaultdict(list)
    for ev in history:
        out[ev.slot].append(ev)
    return out


def check_read_after_write(history: list[Event], initial: bytes | None = None) -> list[str]:
    """Per-slot register linearizability under real-time (simulator) order.

    A read may return the value of write ``w`` only if ``w`` started before
    the read ended and no other write lies entirely between ``w`` and the
    read. Two reads ordered in real time must not observe writes in the
    opposite real-time order.
    """
    findings: list[str] = []
    for slot, events in sorted(_by_slot(history).items()):
        writes = [e for e in events if e.kind == "w"]
        reads = [e for e in events if e.kind == "r"]
        by_value: dict[bytes, Event] = {}
        for w in writes:
            if w.value in by_value:
                findings.append(f"{slot}: write value reused")
            by_value[w.value] = w
        observed: list[tuple[Event, Event | None]] = []
        for r in reads:
            if r.value == initial or r.value not in by_value:
                if r.value != initial:
                    findings.append(f"{slot}: read at {r.start} returned a value nobody wrote")
                    continue
                if any(w.end < r.start for w in writes):
                    findings.append(f"{slot}: read at {r.start} missed a completed write")
                observed.append((r, None))
                continue
            w = by_value[r.value]
            if w.start > r.end:
                findings.append(f"{slot}: read at {r.start} saw a write from the future")
            if any(w.end < o.start and o.end < r.start for o in writes):
                findings.append(f"{slot}: read at {r.start} returned an overwritten value")
            observed.append((r, w))
        for r1, w1 in observed:
            for r2, w2 in observed:
                if r1.end < r2.start and w1 is not None and (w2 is None or w2.end < w1.start):
                    findings.append(f"{slot}: read at {r2.start} went back in time")
    return findings


def check_close_to_open(history: list[Event], initial: bytes | None = None) -> list[str]:
    """Readers that open after a writer's close must see that close's writes or newer ones.

    Write events carry the writer's close tick as ``end``; slot versions are
    ordered by that tick. A read's ``start`` is the reader's open tick.
    """
    findings: list[str] = []
    for slot, events in sorted(_by_slot(history).items()):
        writes = sorted((e for e in events if e.kind == "w"), key=lambda e: e.end)
        rank = {w.value: i for i, w in enumerate(writes)}
        for r in (e for e in events if e.kind == "r"):
            required = -1
            for i, w in enumerate(writes):
                if w.end < r.start:
                    required = i
            got = rank.get(r.value, -1 if r.value == initial else None)
            if got is None:
                findings.append(f"{slot}: read opened at {r.start} returned a value nobody wrote")
            elif got < required:
                findings.append(f"{slot}: read opened at {r.start} missed a write closed before it")
    return findings
