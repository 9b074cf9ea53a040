import itertools
import threading

import pytest
from hypothesis import given, settings, strategies as st

from batchsched.model import (
    ACTIVE_STATES,
    TRANSITIONS,
    Job,
    JobState,
    Node,
    PropertyExpr,
    ReservationStatus,
    valid_transition,
)
from batchsched.store import (
    CasResult,
    IllegalTransitionError,
    JobFilter,
    Occupation,
    Store,
    StoreError,
    UnknownJobError,
)

from oracles import oversubscriptions

S = JobState


class Tick:
    def __init__(self, t=0):
        self.t = t

    def __call__(self):
        return self.t


def store(nodes=("a", "b"), capacity=2):
    return Store([Node(n, capacity) for n in nodes], clock=Tick())


def job(user="u", command="cmd", **kw):
    return Job(user, command, **kw)


# -- insert_job ------------------------------------------------------------------

def test_ids_start_at_one_and_increase():
    s = store()
    assert s.insert_job(job()) == 1
    assert s.insert_job(job()) == 2


def test_concurrent_inserts_get_distinct_ids():
    s = store()
    ids, lock = [], threading.Lock()

    def worker():
        for _ in range(100):
            i = s.insert_job(job())
            with lock:
                ids.append(i)

    threads = [threading.Thread(target=worker) for _ in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert sorted(ids) == list(range(1, 1001))


def test_insert_requires_waiting():
    with pytest.raises(StoreError):
        store().insert_job(job(state=S.RUNNING))


def test_returned_rows_are_copies():
    s = store()
    i = s.insert_job(job())
    s.get_job(i).user = "mallory"
    assert s.get_job(i).user == "u"


# -- cas_update_state ------------------------------------------------------------

def test_cas_examples():
    s = store()
    i = s.insert_job(job())
    assert s.cas_update_state(i, S.WAITING, S.TO_LAUNCH) == CasResult.UPDATED
    h = s.insert_job(job())
    s.cas_update_state(h, S.WAITING, S.HOLD)
    assert s.cas_update_state(h, S.WAITING, S.TO_LAUNCH) == CasResult.CONFLICT
    assert s.get_job(h).state == S.HOLD


def test_cas_rejects_illegal_edges_before_touching_the_row():
    s = store()
    i = s.insert_job(job())
    with pytest.raises(IllegalTransitionError):
        s.cas_update_state(i, S.WAITING, S.RUNNING)
    assert s.get_job(i).state == S.WAITING
    with pytest.raises(UnknownJobError):
        s.cas_update_state(99, S.WAITING, S.TO_LAUNCH)


def test_cas_writes_updates_atomically():
    s = store()
    i = s.insert_job(job())
    s.cas_update_state(i, S.WAITING, S.TO_ERROR, message="boom")
    assert s.get_job(i).message == "boom"
    assert s.cas_update_state(i, S.WAITING, S.TO_LAUNCH, message="x") == CasResult.CONFLICT
    assert s.get_job(i).message == "boom"


def test_two_racers_exactly_one_wins():
    for _ in range(50):
        s = store()
        i = s.insert_job(job())
        barrier = threading.Barrier(2)
        results = []

        def race():
            barrier.wait()
            results.append(s.cas_update_state(i, S.WAITING, S.TO_LAUNCH))

        threads = [threading.Thread(target=race) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(r.value for r in results) == ["Conflict", "Updated"]


RACE_OPS = [(S.WAITING, S.TO_LAUNCH), (S.WAITING, S.HOLD), (S.WAITING, S.TO_ERROR),
            (S.HOLD, S.WAITING), (S.TO_LAUNCH, S.LAUNCHING), (S.HOLD, S.TO_ERROR)]


def serial_outcomes(ops):
    """Every (final state, per-racer results) reachable by some serial order."""
    outcomes = set()
    for order in itertools.permutations(range(len(ops))):
        state, results = S.WAITING, [None] * len(ops)
        for k in order:
            exp, nxt = ops[k]
            if state == exp:
                state, results[k] = nxt, "Updated"
            else:
                results[k] = "Conflict"
        outcomes.add((state, tuple(results)))
    return outcomes


@settings(max_examples=60, deadline=None)
@given(st.lists(st.sampled_from(RACE_OPS), min_size=2, max_size=4))
def test_concurrent_cas_is_serializable(ops):
    s = store()
    i = s.insert_job(job())
    barrier = threading.Barrier(len(ops))
    results = [None] * len(ops)

    def race(k):
        barrier.wait()
        results[k] = s.cas_update_state(i, *ops[k]).value

    threads = [threading.Thread(target=race, args=(k,)) for k in range(len(ops))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert (s.get_job(i).state, tuple(results)) in serial_outcomes(ops)


def test_state_history_is_a_legal_path():
    s = store()
    i = s.insert_job(job())
    for a, b in [(S.WAITING, S.HOLD), (S.HOLD, S.WAITING), (S.WAITING, S.TO_LAUNCH),
                 (S.TO_LAUNCH, S.LAUNCHING), (S.LAUNCHING, S.RUNNING),
                 (S.RUNNING, S.TERMINATED)]:
        s.cas_update_state(i, a, b)
    path = [S.WAITING] + [S(r.detail.split("->")[1]) for r in s.accounting(i) if r.kind == "state"]
    assert all(valid_transition(a, b) for a, b in zip(path, path[1:]))
    assert path[-1] == S.TERMINATED


def test_leaving_active_states_drops_assignment():
    s = store()
    i = s.insert_job(job())
    s.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
    s.set_assignment(i, [("a", 1)])
    s.cas_update_state(i, S.TO_LAUNCH, S.LAUNCHING)
    assert s.assignment(i) == [("a", 1)]
    s.cas_update_state(i, S.LAUNCHING, S.TO_ERROR)
    assert s.assignment(i) == []


def test_assignment_validation():
    s = store()
    i = s.insert_job(job())
    with pytest.raises(StoreError):
        s.set_assignment(i, [("a", 1)])  # still Waiting
    s.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
    with pytest.raises(StoreError):
        s.set_assignment(i, [("a", 3)])
    with pytest.raises(StoreError):
        s.set_assignment(i, [("zz", 1)])


def test_update_job_refuses_state():
    s = store()
    i = s.insert_job(job())
    with pytest.raises(StoreError):
        s.update_job(i, state=S.RUNNING)
    with pytest.raises(AttributeError):
        s.update_job(i, colour="red")


# -- query_jobs ----------------------------------------------------------------

def test_query_examples():
    s = store()
    assert s.query_jobs() == []
    a, b, c = (s.insert_job(job()) for _ in range(3))
    s.cas_update_state(b, S.WAITING, S.TO_LAUNCH)
    s.cas_update_state(b, S.TO_LAUNCH, S.LAUNCHING)
    s.cas_update_state(b, S.LAUNCHING, S.RUNNING)
    assert [j.job_id for j in s.query_jobs(JobFilter(state=S.WAITING))] == [a, c]


job_specs = st.lists(st.tuples(st.sampled_from(["u", "v", "w"]),
                               st.sampled_from(["default", "besteffort", "big"]),
                               st.booleans(),
                               st.sampled_from([S.WAITING, S.HOLD, S.TO_ERROR]),
                               st.integers(0, 20)), max_size=12)
filters = st.builds(JobFilter,
                    state=st.sampled_from([None, S.WAITING, S.HOLD, S.TO_ERROR]),
                    queue_name=st.sampled_from([None, "default", "big"]),
                    user=st.sampled_from([None, "u", "v"]),
                    best_effort=st.sampled_from([None, True, False]),
                    submitted_from=st.sampled_from([None, 5]),
                    submitted_to=st.sampled_from([None, 15]))


@given(job_specs, filters)
def test_query_matches_linear_scan(specs, flt):
    s = store()
    for user, queue, be, state, t in specs:
        i = s.insert_job(job(user, queue_name=queue, best_effort=be, submission_time=t))
        if state != S.WAITING:
            s.cas_update_state(i, S.WAITING, state)
    rows = [s.get_job(i) for i in range(1, len(specs) + 1)]

    def pred(j):
        return ((flt.state is None or j.state == flt.state)
                and (flt.queue_name is None or j.queue_name == flt.queue_name)
                and (flt.user is None or j.user == flt.user)
                and (flt.best_effort is None or j.best_effort == flt.best_effort)
                and (flt.submitted_from is None or j.submission_time >= flt.submitted_from)
                and (flt.submitted_to is None or j.submission_time <= flt.submitted_to))

    assert s.query_jobs(flt) == [j for j in rows if pred(j)]


# -- snapshot_occupations --------------------------------------------------------

def running(s, nodes, start, max_time):
    i = s.insert_job(job(nb_nodes=len(nodes), max_time=max_time))
    s.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
    s.set_assignment(i, [(n, 1) for n in nodes])
    s.cas_update_state(i, S.TO_LAUNCH, S.LAUNCHING, start_time=start)
    s.cas_update_state(i, S.LAUNCHING, S.RUNNING)
    return i


def test_occupations_empty():
    assert store().snapshot_occupations(0) == []


def test_occupations_running_job():
    s = store()
    i = running(s, ["a", "b"], 10, 100)
    assert s.snapshot_occupations(20) == [Occupation(i, "a", 1, 10, 110),
                                          Occupation(i, "b", 1, 10, 110)]


def test_occupations_union_with_reservations():
    s = store(("a", "b", "c"))
    i = running(s, ["a"], 0, 50)
    r = s.insert_job(job(max_time=30, reservation=ReservationStatus.TO_SCHEDULE,
                         reserved_start=100))
    s.cas_update_state(r, S.WAITING, S.TO_ACK_RESERVATION)
    s.set_reservation(r, 100, [("b", 2), ("c", 2)])
    s.cas_update_state(r, S.TO_ACK_RESERVATION, S.WAITING,
                       reservation=ReservationStatus.SCHEDULED)
    occ = s.snapshot_occupations(0)
    assert occ == [Occupation(i, "a", 1, 0, 50), Occupation(r, "b", 2, 100, 130),
                   Occupation(r, "c", 2, 100, 130)]


def test_occupations_to_launch_starts_now():
    s = store()
    i = s.insert_job(job(max_time=10))
    s.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
    s.set_assignment(i, [("a", 2)])
    assert s.snapshot_occupations(7) == [Occupation(i, "a", 2, 7, 17)]


# -- flags and accounting ----------------------------------------------------------

def test_flags_cleared_on_terminal():
    s = store()
    i = s.insert_job(job())
    s.flag_cancellation(i, "bye")
    assert s.flagged() == [i]
    s.cas_update_state(i, S.WAITING, S.TO_ERROR)
    s.cas_update_state(i, S.TO_ERROR, S.ERROR)
    assert s.flagged() == []
    s.flag_cancellation(i)
    assert s.flagged() == []


def test_accounting_examples():
    s = store()
    i = s.insert_job(job())
    assert len(s.accounting()) == 1
    s.record_accounting(i, "note", "first")
    s.record_accounting(i, "note", "second")
    assert [r.detail for r in s.accounting(i)][-2:] == ["first", "second"]
    with pytest.raises(UnknownJobError):
        s.record_accounting(42, "note")


def test_accounting_lifecycle():
    clock = Tick()
    s = Store([Node("a")], clock=clock)
    i = s.insert_job(job())
    steps = [(S.WAITING, S.TO_LAUNCH), (S.TO_LAUNCH, S.LAUNCHING),
             (S.LAUNCHING, S.RUNNING), (S.RUNNING, S.TERMINATED)]
    for k, (a, b) in enumerate(steps):
        clock.t = 10 * (k + 1)
        s.cas_update_state(i, a, b)
    recs = s.accounting(i)
    assert [r.kind for r in recs] == ["submit"] + ["state"] * 4
    assert [r.detail for r in recs[1:]] == ["%s->%s" % st_ for st_ in steps]
    times = [r.timestamp for r in recs]
    assert times == sorted(times)


# -- persistence ---------------------------------------------------------------------

def populated():
    s = Store([Node("a", 2, properties={"mem": 512, "switch": "s1"}), Node("b", 1)],
              clock=Tick(3))
    i = s.insert_job(job("tab\tuser", command="echo 'a\nb' \\ done", max_time=60,
                         properties=PropertyExpr.parse("mem >= 256"), info_type="host:1"))
    s.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
    s.set_assignment(i, [("a", 2)])
    r = s.insert_job(job(reservation=ReservationStatus.TO_SCHEDULE, reserved_start=50,
                         best_effort=True, queue_name="besteffort", actual_duration=5))
    s.cas_update_state(r, S.WAITING, S.TO_ACK_RESERVATION)
    s.set_reservation(r, 50, [("b", 1)])
    s.flag_cancellation(r, "why not")
    s.insert_job(job(message=""))
    return s


def test_snapshot_round_trip():
    s = populated()
    text = s.dumps()
    t = Store.loads(text)
    assert t.dumps() == text
    assert t.query_jobs() == s.query_jobs()
    assert t.nodes() == s.nodes()
    assert t.assignments() == s.assignments()
    assert t.flagged() == s.flagged()
    assert t.accounting() == s.accounting()
    assert t.insert_job(job()) == 4


def test_snapshot_rejects_foreign_files():
    with pytest.raises(StoreError):
        Store.loads("hello\n")


def test_save_and_load(tmp_path):
    s = populated()
    path = str(tmp_path / "snap.tsv")
    s.save(path)
    assert Store.load(path).dumps() == s.dumps()


def test_file_store_shares_state_between_instances(tmp_path):
    path = str(tmp_path / "store.tsv")
    engine = Store.open(path, nodes=[Node("a", 2)], clock=Tick())
    client = Store.open(path, clock=Tick(), recover=False)
    i = client.insert_job(job())
    assert engine.get_job(i).state == S.WAITING
    engine.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
    assert client.get_job(i).state == S.TO_LAUNCH
    assert [n.name for n in client.nodes()] == ["a"]


def test_reopen_recovers_active_jobs(tmp_path):
    path = str(tmp_path / "store.tsv")
    s = Store.open(path, nodes=[Node("a", 2)], clock=Tick())
    i = running(s, ["a"], 0, 100)
    w = s.insert_job(job())
    again = Store.open(path, clock=Tick())
    assert again.get_job(i).state == S.TO_ERROR
    assert "restarted" in again.get_job(i).message
    assert again.get_job(w).state == S.WAITING
    assert again.assignments() == {}


# -- over-subscription of stored occupations ----------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 2), st.integers(1, 2), st.integers(0, 20),
                          st.integers(1, 20)), max_size=10))
def test_snapshot_respects_capacity_when_inserts_do(jobs):
    """Insert running jobs only where capacity allows; the snapshot agrees."""
    s = store(("a", "b", "c"))
    names = ["a", "b", "c"]
    accepted = []
    for node, procs, start, dur in jobs:
        trial = accepted + [(names[node], procs, start, start + dur)]
        if oversubscriptions({n: 2 for n in names}, trial):
            continue
        accepted = trial
        i = s.insert_job(job(max_time=dur, weight=procs))
        s.cas_update_state(i, S.WAITING, S.TO_LAUNCH)
        s.set_assignment(i, [(names[node], procs)])
        s.cas_update_state(i, S.TO_LAUNCH, S.LAUNCHING, start_time=start)
    pieces = [(o.node, o.procs, o.start, o.end) for o in s.snapshot_occupations(0)]
    assert not oversubscriptions({n: 2 for n in names}, pieces)
    assert sorted(pieces) == sorted(accepted)


def test_active_states_constant():
    assert ACTIVE_STATES == {S.TO_LAUNCH, S.LAUNCHING, S.RUNNING}
    assert all(TRANSITIONS[s] for s in ACTIVE_STATES)
