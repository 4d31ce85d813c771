from __future__ import annotations

import pytest

from tierfs.errors import NotFound, RpcTimeout
from tierfs.simnet import Call, CrashFault, FaultPlan, Gather, MessageFault, Sim, Sleep, retrying_call


class Echo:
    def __init__(self):
        self.seen = []
        self.crashes = 0
        self.restarts = 0

    def handle(self, src, msg):
        self.seen.append((src, msg.kind, msg.body.get("n")))
        if msg.kind == "missing":
            raise NotFound("nope")
        if msg.kind == "slow":
            def gen():
                yield Sleep(10)
                return msg.body["n"] * 10
            return gen()
        return msg.body.get("n")

    def on_crash(self):
        self.crashes += 1

    def on_restart(self):
        self.restarts += 1


def build(seed=0, **kw):
    sim = Sim(seed, **kw)
    servers = {n: Echo() for n in ("a", "b")}
    for n, e in servers.items():
        sim.register(n, e)
    sim.register("c", Echo())
    return sim, servers


def client(n=3):
    out = []
    for i in range(n):
        out.append((yield Call("a", "echo", {"n": i})))
    return out


def test_call_round_trip_takes_two_latencies():
    sim, _ = build(latency=3)
    assert sim.run_task("c", client(1)) == [0]
    assert sim.now == 6


def test_link_latency_override():
    sim, _ = build()
    sim.link_latency[("c", "a")] = 7
    sim.run_task("c", client(1))
    assert sim.now == 8


def test_remote_errors_propagate():
    sim, _ = build()

    def gen():
        yield Call("a", "missing", {})

    with pytest.raises(NotFound):
        sim.run_task("c", gen())


def test_generator_handlers_and_gather():
    sim, _ = build()

    def gen():
        return (yield Gather([Call("a", "slow", {"n": 1}), Call("b", "echo", {"n": 2}),
                              Call("b", "missing", {})]))

    res = sim.run_task("c", gen())
    assert res[:2] == [10, 2]
    assert isinstance(res[2], NotFound)


def test_same_seed_same_trace():
    digests = []
    for _ in range(2):
        sim, _ = build(seed=5, jitter=4)
        sim.run_task("c", client(10))
        digests.append(sim.trace_digest())
    assert digests[0] == digests[1]
    sim, _ = build(seed=6, jitter=4)
    sim.run_task("c", client(10))
    assert sim.trace_digest() != digests[0]


def test_dropped_request_times_out():
    sim, servers = build(faults=FaultPlan(messages=[MessageFault("drop", kind="echo", ordinal=2)]))
    with pytest.raises(RpcTimeout):
        sim.run_task("c", client(3))
    assert [n for _, _, n in servers["a"].seen] == [0]


def test_dropped_response_still_executes():
    sim, servers = build(faults=FaultPlan(messages=[MessageFault("drop", responses=True, ordinal=1)]))
    with pytest.raises(RpcTimeout):
        sim.run_task("c", client(1))
    assert len(servers["a"].seen) == 1


def test_duplicate_delivers_twice_but_resolves_once():
    sim, servers = build(faults=FaultPlan(messages=[MessageFault("duplicate")]))
    assert sim.run_task("c", client(2)) == [0, 1]
    sim.run()
    assert [n for _, _, n in servers["a"].seen] == [0, 0, 1, 1]


def test_partition_and_heal():
    sim, _ = build()
    sim.partition("c", "a")
    with pytest.raises(RpcTimeout):
        sim.run_task("c", client(1))
    sim.heal("c", "a")
    assert sim.run_task("c", client(1)) == [0]


def test_crashed_node_silent_until_restart():
    sim, servers = build()
    sim.crash("a")
    assert servers["a"].crashes == 1
    with pytest.raises(RpcTimeout):
        sim.run_task("c", client(1))
    sim.restart("a")
    assert servers["a"].restarts == 1
    assert sim.run_task("c", client(1)) == [0]


def test_crash_fault_counts_durable_points():
    plan = FaultPlan(crashes=[CrashFault(2, "after", restart_after=None)])
    sim, servers = build(faults=plan)

    def writer():
        for label in ("X", "Y", "Z"):
            sim.durable_point("a", "before", label)
            sim.durable_point("a", "after", label)
            yield Sleep(1)

    sim.spawn("a", writer())
    sim.run()
    assert [label for _, _, label in sim.durable_writes] == ["X", "Y"]
    assert not sim.alive("a")
    assert plan.exhausted


def test_retrying_call_recovers_from_a_drop():
    sim, _ = build(faults=FaultPlan(messages=[MessageFault("drop", ordinal=1)]))
    gen = retrying_call(sim, lambda: Call("a", "echo", {"n": 4}), key="k")
    assert sim.run_task("c", gen) == 4
    assert sim.total_retries == 1


def test_sleep_and_periodic_timers_do_not_block_quiescence():
    sim, _ = build()
    ticks = []
    sim.every("a", 10, lambda: ticks.append(sim.now))
    sim.run(until=35)
    assert ticks == [10, 20, 30]
    assert sim.run() == 0
