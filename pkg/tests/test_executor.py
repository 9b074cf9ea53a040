import random
import time

import pytest
from hypothesis import given, settings, strategies as st

from batchsched.executor import (
    EventKind,
    ExecutionEvent,
    Executor,
    ScriptedProber,
    VirtualClock,
    WallClock,
    check_nodes,
)
from batchsched.model import Health, Job, JobState, Node
from batchsched.store import Store

S = JobState


def setup(nodes=("a", "b"), **kw):
    clock = VirtualClock()
    store = Store([Node(n, 2) for n in nodes], clock=clock)
    return clock, store, Executor(store, clock, **kw)


def to_launch(store, assignment=(("a", 1),), max_time=20, actual=None, **kw):
    i = store.insert_job(Job("u", "c", max_time=max_time, actual_duration=actual,
                             nb_nodes=len(assignment), **kw))
    store.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
    store.set_assignment(i, assignment)
    return i


def drain(clock, ex):
    while True:
        ev = clock.advance()
        if ev is None:
            return
        ex.finish(ev)


# -- clock ---------------------------------------------------------------------

def test_clock_ordering():
    clock = VirtualClock()
    assert clock.advance() is None
    clock.schedule(ExecutionEvent(EventKind.JOB_COMPLETED, 5, 1))
    clock.schedule(ExecutionEvent(EventKind.JOB_COMPLETED, 3, 2))
    clock.schedule(ExecutionEvent(EventKind.JOB_COMPLETED, 3, 3))
    assert [clock.advance().job_id for _ in range(3)] == [2, 3, 1]
    assert clock.now == 5


def test_clock_rejects_past_and_voids():
    clock = VirtualClock(10)
    with pytest.raises(ValueError):
        clock.schedule(ExecutionEvent(EventKind.JOB_COMPLETED, 9, 1))
    tok = clock.schedule(ExecutionEvent(EventKind.JOB_COMPLETED, 12, 1))
    clock.schedule(ExecutionEvent(EventKind.JOB_COMPLETED, 15, 2))
    clock.void(tok)
    assert clock.pending() == 1 and clock.peek_time() == 15
    assert clock.advance().job_id == 2


@given(st.lists(st.one_of(st.tuples(st.just("sched"), st.integers(0, 50)),
                          st.tuples(st.just("adv"), st.just(0)),
                          st.tuples(st.just("to"), st.integers(0, 80)))))
def test_clock_is_monotone(ops):
    clock = VirtualClock()
    last = clock.now
    for op, arg in ops:
        if op == "sched":
            clock.schedule(ExecutionEvent(EventKind.JOB_COMPLETED, clock.now + arg, 1))
        elif op == "adv":
            clock.advance()
        else:
            clock.advance_to(arg)
        assert clock.now >= last
        last = clock.now


def test_wall_clock():
    assert abs(WallClock()() - time.time()) < 2


# -- launch ----------------------------------------------------------------------

def test_job_completes_at_actual_duration():
    clock, store, ex = setup()
    clock.advance_to(100)
    i = to_launch(store, actual=10, max_time=20)
    assert ex.launch(i)
    assert store.get_job(i).state == S.RUNNING and store.get_job(i).start_time == 100
    ev = clock.advance()
    assert (ev.kind, ev.timestamp) == (EventKind.JOB_COMPLETED, 110)
    ex.finish(ev)
    job = store.get_job(i)
    assert (job.state, job.stop_time) == (S.TERMINATED, 110)


def test_walltime_exceeded_goes_to_error():
    clock, store, ex = setup()
    clock.advance_to(100)
    i = to_launch(store, actual=30, max_time=20)
    ex.launch(i)
    ev = clock.advance()
    assert (ev.kind, ev.timestamp) == (EventKind.JOB_WALLTIME_EXCEEDED, 120)
    ex.finish(ev)
    job = store.get_job(i)
    assert (job.state, job.stop_time, job.message) == (S.ERROR, 120, "walltime exceeded")


def test_dead_node_prevents_start():
    clock, store, ex = setup()
    store.set_health("b", Health.DEAD)
    i = to_launch(store, assignment=[("a", 1), ("b", 1)])
    assert not ex.launch(i)
    job = store.get_job(i)
    assert job.state == S.TO_ERROR and job.start_time is None
    assert store.assignment(i) == []


def test_health_check_marks_unreachable_nodes():
    clock = VirtualClock()
    store = Store([Node("a", 2), Node("b", 2)], clock=clock)
    prober = ScriptedProber(outages=[("b", 0, 10)], clock=clock)
    ex = Executor(store, clock, health_check=True, prober=prober)
    i = to_launch(store, assignment=[("b", 1)])
    assert not ex.launch(i)
    assert {n.name: n.health for n in store.nodes()}["b"] == Health.SUSPECTED
    j = to_launch(store, assignment=[("a", 1)])
    assert ex.launch(j)


def test_launch_ignores_jobs_not_to_launch():
    clock, store, ex = setup()
    i = store.insert_job(Job("u", "c"))
    assert not ex.launch(i)
    assert store.get_job(i).state == S.WAITING


def test_job_without_actual_duration_runs_max_time():
    clock, store, ex = setup()
    i = to_launch(store, max_time=7)
    ex.launch(i)
    drain(clock, ex)
    assert store.get_job(i).state == S.TERMINATED and clock.now == 7


# -- cancel ----------------------------------------------------------------------

def test_cancel_waiting_job():
    clock, store, ex = setup()
    i = store.insert_job(Job("u", "c"))
    assert ex.cancel(i, "removed")
    job = store.get_job(i)
    assert job.state == S.ERROR and job.start_time is None and job.message == "removed"


def test_cancel_running_best_effort_frees_now():
    clock, store, ex = setup()
    i = to_launch(store, actual=100, max_time=100, best_effort=True, queue_name="besteffort")
    ex.launch(i)
    clock.advance_to(30)
    store.flag_cancellation(i, "preempted")
    assert ex.cancel(i, "preempted")
    job = store.get_job(i)
    assert (job.state, job.stop_time) == (S.ERROR, 30)
    assert store.assignment(i) == [] and ex.in_use() == {}
    assert store.flagged() == []
    assert clock.pending() == 0  # the completion event is voided
    assert store.snapshot_occupations(30) == []


def test_cancel_terminated_job_is_a_no_op():
    clock, store, ex = setup()
    i = to_launch(store, actual=1)
    ex.launch(i)
    drain(clock, ex)
    assert not ex.cancel(i)
    assert store.get_job(i).state == S.TERMINATED
    assert store.accounting(i)[-1].kind == "warning"


# -- probing ---------------------------------------------------------------------

def test_check_nodes_examples():
    names = ["a", "b", "c"]
    assert set(check_nodes(names, 5, ScriptedProber()).values()) == {Health.ALIVE}
    res = check_nodes(names, 5, ScriptedProber(outages=[("b", 0, 100)]))
    assert res == {"a": Health.ALIVE, "b": Health.SUSPECTED, "c": Health.ALIVE}
    with pytest.raises(ValueError):
        check_nodes(names, 0.5, ScriptedProber())


@given(st.dictionaries(st.sampled_from(["a", "b", "c", "d"]), st.floats(0, 20)),
       st.integers(1, 20), st.integers(1, 20))
def test_smaller_timeout_only_loses_nodes(latency, t1, t2):
    lo, hi = sorted((t1, t2))
    prober = ScriptedProber(latency=latency)
    small = check_nodes(list("abcd"), lo, prober)
    big = check_nodes(list("abcd"), hi, prober)
    for n in "abcd":
        if big[n] == Health.SUSPECTED:
            assert small[n] == Health.SUSPECTED


# -- conservation ----------------------------------------------------------------

@settings(max_examples=80, deadline=None)
@given(st.integers(0, 10**6))
def test_resource_conservation(seed):
    """Executor bookkeeping always equals the store's rows for started jobs."""
    rng = random.Random(seed)
    clock, store, ex = setup(("a", "b", "c"))
    ids = []
    for _ in range(30):
        op = rng.random()
        if op < 0.35:
            node = rng.choice("abc")
            free = 2 - sum(p for a in store.assignments().values() for n, p in a if n == node)
            if free >= 1:
                ids.append(to_launch(store, [(node, 1)], max_time=rng.randint(1, 9),
                                     actual=rng.randint(1, 12)))
        elif op < 0.6 and ids:
            ex.launch(rng.choice(ids))
        elif op < 0.75 and ids:
            ex.cancel(rng.choice(ids))
        else:
            ev = clock.advance()
            if ev is not None:
                ex.finish(ev)
        started = {j.job_id for j in store.query_jobs()
                   if j.state in (S.LAUNCHING, S.RUNNING)}
        rows = {k: v for k, v in store.assignments().items() if k in started}
        assert ex.in_use() == rows
    drain(clock, ex)
    for j in store.query_jobs():
        if j.job_id in ex.launched:
            assert j.state in (S.TERMINATED, S.ERROR)


# -- real processes -----------------------------------------------------------------

def test_real_mode_matches_simulated_trajectory(tmp_path):
    notes = []
    store = Store([Node("local", 2)], clock=WallClock())
    ex = Executor(store, WallClock(), lambda kind, payload=None: notes.append((kind, payload)),
                  real=True)
    i = to_launch(store, [("local", 1)], max_time=30, launching_directory=str(tmp_path))
    store.update_job(i, command="sleep 1 && pwd > out.txt")
    assert ex.launch(i)
    assert store.get_job(i).bpid is not None
    deadline = time.time() + 20
    while ("term", i) not in notes and time.time() < deadline:
        time.sleep(0.05)
    assert ex.reap() == [i]
    assert (tmp_path / "out.txt").read_text().strip() == str(tmp_path)

    sim_clock, sim_store, sim_ex = setup(("local",))
    k = to_launch(sim_store, [("local", 1)], max_time=30, actual=1)
    sim_ex.launch(k)
    drain(sim_clock, sim_ex)

    def path(s, job_id):
        return [r.detail for r in s.accounting(job_id) if r.kind == "state"]

    assert path(store, i) == path(sim_store, k)
    assert store.get_job(i).state == S.TERMINATED


def test_real_mode_cancel_kills_process():
    store = Store([Node("local", 1)], clock=WallClock())
    ex = Executor(store, WallClock(), real=True)
    i = to_launch(store, [("local", 1)], max_time=60)
    store.update_job(i, command="sleep 30")
    ex.launch(i)
    t0 = time.time()
    assert ex.cancel(i, "removed by user")
    assert time.time() - t0 < 5
    assert store.get_job(i).state == S.ERROR
