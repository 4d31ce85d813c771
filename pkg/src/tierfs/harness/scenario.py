"""Scenario files: plain ``key = value`` lines grouped into sections.

::

    seed = 1
    nodes = 1
    chunk_size = 65536

    [workload]
    files = 1024
    dirs = 32

    [schedule]
    step = join 7
    step = leave 8

    [checks]
    check = content

Top-level keys come before the first section. ``step`` and ``check`` may
repeat; every other key appears at most once. Comments start with ``#``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

STEP_ACTIONS = {
    "join": 1,            # join N: add N nodes one at a time
    "leave": 1,           # leave N: remove N nodes one at a time
    "scale_to_zero": 0,
    "cold_start": 1,      # cold_start N: fresh cluster of N nodes on the same object store
    "persist_all": 0,
    "advance": 1,         # advance T: run the simulator for T ticks (background flush)
    "crash_sweep": 1,     # crash_sweep fsync: crash at every durable write of one fsync
}
CHECKS = {"content", "reachability", "migration", "store", "roundtrip", "atomicity", "duplicate_upload"}


class ScenarioError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class WorkloadSpec:
    files: int = 0
    dirs: int = 1
    size_min: int = 1
    size_max: int = 1
    unit: int = 1
    clients: int = 1
    bucket: str = "data"


@dataclass
class Scenario:
    name: str = "scenario"
    seed: int = 0
    nodes: int = 1
    chunk_size: int = 64 * 1024
    mode: str = "strict"
    flush_interval: int = 0
    buckets: list[str] = field(default_factory=lambda: ["data"])
    workload: WorkloadSpec = field(default_factory=WorkloadSpec)
    steps: list[tuple[str, list[str]]] = field(default_factory=list)
    checks: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}", f"nodes = {self.nodes}", f"chunk_size = {self.chunk_size}",
                 f"mode = {self.mode}", f"flush_interval = {self.flush_interval}",
                 f"buckets = {','.join(self.buckets)}", "", "[workload]"]
        lines += [f"{f.name} = {getattr(self.workload, f.name)}" for f in fields(WorkloadSpec)]
        lines += ["", "[schedule]"] + [f"step = {' '.join([a, *args])}" for a, args in self.steps]
        lines += ["", "[checks]"] + [f"check = {c}" for c in self.checks]
        return "\n".join(lines) + "\n"


_TOP = {"seed": int, "nodes": int, "chunk_size": int, "mode": str, "flush_interval": int, "buckets": str}
_WORKLOAD = {f.name: f.type for f in fields(WorkloadSpec)}


def _convert(lineno: int, key: str, raw: str, kind) -> object:
    if kind in (int, "int"):
        try:
            value = int(raw)
        except ValueError:
            raise ScenarioError(lineno, f"{key} must be an integer, got {raw!r}") from None
        if value < 0:
            raise ScenarioError(lineno, f"{key} must not be negative")
        return value
    return raw


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    sc = Scenario(name=name)
    section = None
    seen: set[tuple[str | None, str]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError(lineno, f"malformed section header {line!r}")
            section = line[1:-1].strip()
            if section not in ("workload", "schedule", "checks"):
                raise ScenarioError(lineno, f"unknown section [{section}]")
            continue
        if "=" not in line:
            raise ScenarioError(lineno, f"expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if not raw:
            raise ScenarioError(lineno, f"{key} has no value")
        if (section, key) in seen and key not in ("step", "check"):
            raise ScenarioError(lineno, f"duplicate key {key}")
        seen.add((section, key))
        if section is None:
            if key not in _TOP:
                raise ScenarioError(lineno, f"unknown key {key}")
            if key == "buckets":
                sc.buckets = [b.strip() for b in raw.split(",") if b.strip()]
            elif key == "mode":
                if raw not in ("strict", "weak"):
                    raise ScenarioError(lineno, f"mode must be strict or weak, got {raw!r}")
                sc.mode = raw
            else:
                setattr(sc, key, _convert(lineno, key, raw, int))
        elif section == "workload":
            if key not in _WORKLOAD:
                raise ScenarioError(lineno, f"unknown workload key {key}")
            kind = int if key != "bucket" else str
            setattr(sc.workload, key, _convert(lineno, key, raw, kind))
        elif section == "schedule":
            if key != "step":
                raise ScenarioError(lineno, f"schedule lines must be 'step = ...', got {key}")
            action, *args = raw.split()
            if action not in STEP_ACTIONS:
                raise ScenarioError(lineno, f"unknown step {action}")
            if len(args) != STEP_ACTIONS[action]:
                raise ScenarioError(lineno, f"step {action} takes {STEP_ACTIONS[action]} argument(s)")
            if action != "crash_sweep":
                for a in args:
                    _convert(lineno, action, a, int)
            sc.steps.append((action, args))
        else:
            if key != "check":
                raise ScenarioError(lineno, f"checks lines must be 'check = ...', got {key}")
            if raw not in CHECKS:
                raise ScenarioError(lineno, f"unknown check {raw}")
            sc.checks.append(raw)
    w = sc.workload
    if w.size_min > w.size_max:
        raise ScenarioError(0, "workload size_min exceeds size_max")
    if sc.workload.bucket not in sc.buckets:
        raise ScenarioError(0, f"workload bucket {sc.workload.bucket} is not configured")
    if sc.chunk_size <= 0:
        raise ScenarioError(0, "chunk_size must be positive")
    return sc


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        bundled = Path(__file__).parent / "scenarios" / f"{path.name.removesuffix('.scn')}.scn"
        if bundled.exists():
            path = bundled
    return parse_scenario(path.read_text(), name=path.stem)


def bundled_scenarios() -> list[str]:
    return sorted(p.stem for p in (Path(__file__).parent / "scenarios").glob("*.scn"))
