"""Deterministic discrete-event simulation of nodes exchanging RPCs.

Node logic is written as generators. A process yields one of:

* ``Call(to, kind, body)`` - resumes with the reply, or raises the remote error
  (``RpcTimeout`` when nothing arrives before the deadline);
* ``Gather([Call, ...])`` - issues calls in parallel, resumes with a list
  whose items are replies or exception instances;
* ``Sleep(ticks)``;
* ``Join(task)`` - waits for another task to finish.

Events run in ``(tick, insertion order)``; nothing consults wall-clock time.
"""

from __future__ import annotations

import copy
import hashlib
import heapq
import itertools
import logging
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, Iterable, Protocol

from .errors import FsError, LivelockError, NodeCrash, RpcTimeout

logger = logging.getLogger(__name__)

DEFAULT_LATENCY = 1
DEFAULT_TIMEOUT = 50
DEFAULT_RETRIES = 5
TICKS_PER_SECOND = 1000


@dataclass
class Message:
    kind: str
    body: dict


@dataclass
class Call:
    to: str
    kind: str
    body: dict = field(default_factory=dict)
    timeout: int | None = None


@dataclass
class Gather:
    calls: list[Call]


@dataclass
class Sleep:
    ticks: int


@dataclass
class Join:
    task: "Task"


class Endpoint(Protocol):
    def handle(self, src: str, msg: Message) -> Any: ...

    def on_crash(self) -> None: ...

    def on_restart(self) -> None: ...


@dataclass
class MessageFault:
    """Scripted message fault.

    Matches on ``kind``/``src``/``dst`` (None = any). With ``ordinal`` set
    only the n-th matching message (1-based) is affected, otherwise all.
    ``action`` is one of ``drop``, ``duplicate``, ``delay``.
    """

    action: str
    kind: str | None = None
    src: str | None = None
    dst: str | None = None
    ordinal: int | None = None
    delay: int = 0
    responses: bool = False
    seen: int = 0

    def matches(self, kind: str, src: str, dst: str, is_response: bool) -> bool:
        if is_response != self.responses:
            return False
        if self.kind is not None and self.kind != kind:
            return False
        if self.src is not None and self.src != src:
            return False
        if self.dst is not None and self.dst != dst:
            return False
        self.seen += 1
        return self.ordinal is None or self.seen == self.ordinal


@dataclass
class CrashFault:
    """Crash ``node`` (None = whichever node writes) around its n-th durable write.

    ``label`` restricts matching to writes of one command (e.g. ``"TX_COMMIT"``).
    ``when`` is ``before`` or ``after``. ``restart_after`` schedules a restart.
    """

    ordinal: int
    when: str = "before"
    node: str | None = None
    label: str | None = None
    restart_after: int | None = 20
    seen: int = 0
    fired: bool = False


@dataclass
class FaultPlan:
    messages: list[MessageFault] = field(default_factory=list)
    crashes: list[CrashFault] = field(default_factory=list)

    @property
    def exhausted(self) -> bool:
        return all(c.fired for c in self.crashes) and all(
            m.ordinal is not None and m.seen >= m.ordinal for m in self.messages
        )


class Task:
    _ids = itertools.count(1)

    def __init__(self, sim: "Sim", node: str, gen: Generator, name: str = ""):
        self.id = next(Task._ids)
        self.sim = sim
        self.node = node
        self.gen = gen
        self.name = name
        self.epoch = sim.epoch(node)
        self.done = False
        self.result: Any = None
        self.error: BaseException | None = None
        self._callbacks: list[Callable[["Task"], None]] = []
        self._pending: set[int] = set()
        self._gather: dict | None = None

    def add_done_callback(self, fn: Callable[["Task"], None]) -> None:
        if self.done:
            fn(self)
        else:
            self._callbacks.append(fn)

    def value(self):
        if not self.done:
            raise RuntimeError(f"task {self.name or self.id} not finished")
        if self.error is not None:
            raise self.error
        return self.result

    def __repr__(self) -> str:
        return f"<Task {self.id} {self.name} on {self.node}>"


@dataclass
class _PendingCall:
    task: Task
    slot: int | None


def digest(obj: Any) -> str:
    return hashlib.blake2b(repr(obj).encode(), digest_size=6).hexdigest()


class Sim:
    def __init__(self, seed: int = 0, latency: int = DEFAULT_LATENCY, jitter: int = 0,
                 faults: FaultPlan | None = None, max_retries: int = 500):
        self.seed = seed
        self.rng = random.Random(seed)
        self.now = 0
        self.latency = latency
        self.jitter = jitter
        self.link_latency: dict[tuple[str, str], int] = {}
        self.faults = faults or FaultPlan()
        self.partitions: set[frozenset[str]] = set()
        self.max_retries = max_retries
        self.endpoints: dict[str, Endpoint] = {}
        self._epochs: dict[str, int] = {}
        self._alive: dict[str, bool] = {}
        self._queue: list = []
        self._seq = itertools.count()
        self._call_ids = itertools.count(1)
        self._pending: dict[int, _PendingCall] = {}
        self._tasks: dict[str, set[Task]] = {}
        self._nonperiodic = 0
        self._retry_counts: dict[Any, int] = {}
        self._crash_after: dict[str, CrashFault] = {}
        self.trace: list[str] = []
        self.durable_writes: list[tuple[int, str, str]] = []
        self.executed = 0
        self.message_counts: dict[str, int] = {}

    # -- registration --------------------------------------------------

    def register(self, node_id: str, endpoint: Endpoint) -> None:
        self.endpoints[node_id] = endpoint
        self._epochs[node_id] = self._epochs.get(node_id, 0) + 1
        self._alive[node_id] = True
        self._tasks.setdefault(node_id, set())

    def unregister(self, node_id: str) -> None:
        self._kill_tasks(node_id)
        self._alive[node_id] = False
        self._epochs[node_id] = self._epochs.get(node_id, 0) + 1
        self.endpoints.pop(node_id, None)
        self._log_event("shutdown", node_id, "-", "")

    def alive(self, node_id: str) -> bool:
        return self._alive.get(node_id, False)

    def epoch(self, node_id: str) -> int:
        return self._epochs.get(node_id, 0)

    # -- event queue ---------------------------------------------------

    def schedule(self, delay: int, fn: Callable[[], None], node: str | None = None,
                 periodic: bool = False) -> None:
        epoch = self.epoch(node) if node is not None else None
        if not periodic:
            self._nonperiodic += 1
        heapq.heappush(self._queue, (self.now + max(0, delay), next(self._seq), fn, node, epoch, periodic))

    def every(self, node: str, interval: int, fn: Callable[[], None]) -> None:
        """Run ``fn`` on ``node`` every ``interval`` ticks while it stays up."""
        epoch = self.epoch(node)

        def tick():
            if self.epoch(node) != epoch or not self.alive(node):
                return
            self._guard(node, fn)
            self.schedule(interval, tick, node, periodic=True)

        self.schedule(interval, tick, node, periodic=True)

    def quiescent(self) -> bool:
        return self._nonperiodic == 0

    def step(self) -> bool:
        if not self._queue:
            return False
        when, _, fn, node, epoch, periodic = heapq.heappop(self._queue)
        if not periodic:
            self._nonperiodic -= 1
        self.now = max(self.now, when)
        if node is not None and (self.epoch(node) != epoch or not self.alive(node)):
            return True
        self.executed += 1
        if node is not None:
            self._guard(node, fn)
        else:
            fn()
        return True

    def run(self, until: int | None = None, max_events: int | None = None) -> int:
        """Drain events until quiescent (only periodic timers left) or tick ``until``."""
        count = 0
        while self._queue:
            if until is None and self.quiescent():
                break
            if until is not None and self._queue[0][0] > until:
                self.now = until
                break
            self.step()
            count += 1
            if max_events is not None and count >= max_events:
                break
        if until is not None and self.now < until and not self._queue:
            self.now = until
        return count

    def run_task(self, node: str, gen: Generator, name: str = "", limit: int | None = None):
        """Spawn ``gen`` on ``node`` and run the simulation until it finishes."""
        task = self.spawn(node, gen, name)
        count = 0
        while not task.done:
            if not self.step():
                raise RuntimeError(f"simulation stalled before {task!r} finished")
            count += 1
            if limit is not None and count > limit:
                raise LivelockError(f"{task!r} did not finish within {limit} events")
        return task.value()

    # -- processes -----------------------------------------------------

    def spawn(self, node: str, gen: Generator, name: str = "") -> Task:
        task = Task(self, node, gen, name)
        self._tasks.setdefault(node, set()).add(task)
        self.schedule(0, lambda: self._advance(task, None, None), node)
        return task

    def _guard(self, node: str, fn: Callable[[], None]) -> None:
        try:
            fn()
        except NodeCrash:
            self.crash(node)

    def _advance(self, task: Task, value: Any, error: BaseException | None) -> None:
        if task.done:
            return
        if task.epoch != self.epoch(task.node) or not self.alive(task.node):
            return
        try:
            if error is not None:
                instr = task.gen.throw(error)
            else:
                instr = task.gen.send(value)
        except StopIteration as stop:
            self._finish(task, stop.value, None)
            return
        except NodeCrash:
            self.crash(task.node)
            return
        except LivelockError:
            raise
        except Exception as exc:  # noqa: BLE001 - errors travel back to the caller
            self._finish(task, None, exc)
            return
        self._dispatch(task, instr)

    def _finish(self, task: Task, result: Any, error: BaseException | None) -> None:
        task.done = True
        task.result = result
        task.error = error
        self._tasks.get(task.node, set()).discard(task)
        callbacks, task._callbacks = task._callbacks, []
        for cb in callbacks:
            cb(task)

    def _dispatch(self, task: Task, instr: Any) -> None:
        if isinstance(instr, Call):
            self._start_call(task, instr, None)
        elif isinstance(instr, Gather):
            if not instr.calls:
                self.schedule(0, lambda: self._advance(task, [], None), task.node)
                return
            task._gather = {"results": [None] * len(instr.calls), "left": len(instr.calls)}
            for i, call in enumerate(instr.calls):
                self._start_call(task, call, i)
        elif isinstance(instr, Sleep):
            self.schedule(instr.ticks, lambda: self._advance(task, None, None), task.node)
        elif isinstance(instr, Join):
            other = instr.task

            def resume(t: Task):
                self.schedule(0, lambda: self._advance(task, t.result, t.error), task.node)

            other.add_done_callback(resume)
        else:
            self._advance(task, None, TypeError(f"unsupported yield {instr!r}"))

    # -- RPC -----------------------------------------------------------

    def link_delay(self, src: str, dst: str) -> int:
        base = self.link_latency.get((src, dst), self.latency)
        if self.jitter:
            base += self.rng.randint(0, self.jitter)
        return base

    def _start_call(self, task: Task, call: Call, slot: int | None) -> None:
        call_id = next(self._call_ids)
        self._pending[call_id] = _PendingCall(task, slot)
        task._pending.add(call_id)
        body = copy.deepcopy(call.body)
        self._transmit(task.node, call.to, call.kind, body, call_id, response=False)
        timeout = call.timeout if call.timeout is not None else DEFAULT_TIMEOUT
        self.schedule(timeout, lambda: self._resolve(call_id, None, RpcTimeout(f"{call.kind} to {call.to}")),
                      task.node)

    def _transmit(self, src: str, dst: str, kind: str, body: Any, call_id: int, response: bool,
                  error: BaseException | None = None) -> None:
        copies, extra = 1, 0
        for fault in self.faults.messages:
            if fault.matches(kind, src, dst, response):
                if fault.action == "drop":
                    copies = 0
                elif fault.action == "duplicate":
                    copies = 2
                elif fault.action == "delay":
                    extra += fault.delay
        if frozenset((src, dst)) in self.partitions:
            copies = 0
        tag = "resp" if response else "req"
        self.message_counts[kind] = self.message_counts.get(kind, 0) + (0 if response else 1)
        status = "drop" if copies == 0 else ("dup" if copies == 2 else "ok")
        self._log_event(f"{tag}:{kind}", src, dst, f"{digest(error if error else body)} {status}")
        for i in range(copies):
            delay = self.link_delay(src, dst) + extra + i
            if response:
                self.schedule(delay, lambda: self._deliver_response(dst, call_id, body, error), dst)
            else:
                self.schedule(delay, lambda: self._deliver_request(src, dst, kind, body, call_id), dst)

    def _deliver_request(self, src: str, dst: str, kind: str, body: dict, call_id: int) -> None:
        endpoint = self.endpoints.get(dst)
        if endpoint is None or not self.alive(dst):
            return
        msg = Message(kind, copy.deepcopy(body))
        try:
            out = endpoint.handle(src, msg)
        except NodeCrash:
            self.crash(dst)
            return
        except LivelockError:
            raise
        except Exception as exc:  # noqa: BLE001
            self._reply(dst, src, kind, call_id, None, exc)
            return
        if isinstance(out, Generator):
            task = self.spawn(dst, out, name=f"{kind}<-{src}")
            task.add_done_callback(lambda t: self._reply(dst, src, kind, call_id, t.result, t.error))
        else:
            self._reply(dst, src, kind, call_id, out, None)

    def _reply(self, src: str, dst: str, kind: str, call_id: int, result: Any, error: BaseException | None):
        if not self.alive(src):
            return
        if error is not None and not isinstance(error, FsError):
            logger.error("handler %s on %s failed: %r", kind, src, error)
            if not isinstance(error, Exception):
                return
        self._transmit(src, dst, kind, copy.deepcopy(result), call_id, response=True, error=error)

    def _deliver_response(self, dst: str, call_id: int, body: Any, error: BaseException | None) -> None:
        self._resolve(call_id, body, error)

    def _resolve(self, call_id: int, value: Any, error: BaseException | None) -> None:
        pending = self._pending.pop(call_id, None)
        if pending is None:
            return
        task = pending.task
        task._pending.discard(call_id)
        if task.done or task.epoch != self.epoch(task.node):
            return
        if pending.slot is None:
            self.schedule(0, lambda: self._advance(task, value, error), task.node)
            return
        g = task._gather
        g["results"][pending.slot] = error if error is not None else value
        g["left"] -= 1
        if g["left"] == 0:
            results = g["results"]
            task._gather = None
            self.schedule(0, lambda: self._advance(task, results, None), task.node)

    # -- faults --------------------------------------------------------

    def durable_point(self, node: str, phase: str, label: str) -> None:
        """Hook called by a node's log around every durable write."""
        if phase == "after":
            self.durable_writes.append((self.now, node, label))
            fault = self._crash_after.pop(node, None)
            if fault is not None:
                self._fire(node, fault)
            return
        for fault in self.faults.crashes:
            if fault.fired:
                continue
            if fault.node is not None and fault.node != node:
                continue
            if fault.label is not None and fault.label != label:
                continue
            fault.seen += 1
            if fault.seen == fault.ordinal:
                if fault.when == "before":
                    self._fire(node, fault)
                else:
                    self._crash_after[node] = fault

    def _fire(self, node: str, fault: CrashFault) -> None:
        fault.fired = True
        self._log_event("crash-point", node, "-", f"{fault.when} #{fault.ordinal}")
        if fault.restart_after is not None:
            self.schedule(fault.restart_after, lambda: self.restart(node))
        raise NodeCrash(node)

    def _kill_tasks(self, node: str) -> None:
        for task in list(self._tasks.get(node, ())):
            for call_id in task._pending:
                self._pending.pop(call_id, None)
            task._pending.clear()
            task.done = True
            task.error = NodeCrash(node)
            try:
                task.gen.close()
            except BaseException:  # noqa: BLE001 - generator cleanup during crash
                pass
        self._tasks[node] = set()

    def crash(self, node: str, at: int | None = None) -> None:
        if at is not None and at > self.now:
            self.schedule(at - self.now, lambda: self.crash(node))
            return
        if not self.alive(node):
            return
        self._log_event("crash", node, "-", "")
        self._alive[node] = False
        self._epochs[node] += 1
        self._kill_tasks(node)
        endpoint = self.endpoints.get(node)
        if endpoint is not None:
            endpoint.on_crash()

    def restart(self, node: str, at: int | None = None) -> None:
        if at is not None and at > self.now:
            self.schedule(at - self.now, lambda: self.restart(node))
            return
        endpoint = self.endpoints.get(node)
        if endpoint is None or self.alive(node):
            return
        self._alive[node] = True
        self._epochs[node] += 1
        self._log_event("restart", node, "-", "")
        try:
            endpoint.on_restart()
        except NodeCrash:
            self.crash(node)

    def partition(self, a: str, b: str) -> None:
        self.partitions.add(frozenset((a, b)))
        self._log_event("partition", a, b, "")

    def heal(self, a: str, b: str) -> None:
        self.partitions.discard(frozenset((a, b)))
        self._log_event("heal", a, b, "")

    def note_retry(self, key: Any) -> int:
        """Count one retry of ``key`` (normally a TxId); trips the livelock detector."""
        n = self._retry_counts[key] = self._retry_counts.get(key, 0) + 1
        if n > self.max_retries:
            raise LivelockError(f"{key} retried {n} times without progress")
        return n

    @property
    def total_retries(self) -> int:
        return sum(self._retry_counts.values())

    # -- trace ---------------------------------------------------------

    def _log_event(self, kind: str, src: str, dst: str, detail: str) -> None:
        self.trace.append(f"{self.now} {kind} {src} {dst} {detail}".rstrip())

    def trace_digest(self) -> str:
        return hashlib.sha256("\n".join(self.trace).encode()).hexdigest()

    def backoff(self, attempt: int, base: int = 2, cap: int = 64) -> int:
        """Exponential backoff with full jitter, drawn from the seeded RNG."""
        return self.rng.randint(1, min(cap, base * (2 ** min(attempt, 10))))


def retrying_call(sim: Sim, call_factory: Callable[[], Call], key: Any,
                  retries: int | None = DEFAULT_RETRIES,
                  retry_on: tuple[type[BaseException], ...] = (RpcTimeout,),
                  on_retry: Callable[[BaseException], None] | None = None) -> Generator:
    """Issue a call, retrying transient failures with backoff. ``retries=None`` retries forever."""
    attempt = 0
    while True:
        try:
            return (yield call_factory())
        except retry_on as exc:
            attempt += 1
            if retries is not None and attempt > retries:
                raise
            sim.note_retry(key)
            if on_retry is not None:
                on_retry(exc)
            yield Sleep(sim.backoff(attempt))


def gather_results(results: Iterable[Any]) -> tuple[list[Any], list[BaseException]]:
    values, errors = [], []
    for r in results:
        (errors if isinstance(r, BaseException) else values).append(r)
    return values, errors
