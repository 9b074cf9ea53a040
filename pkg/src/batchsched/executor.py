"""Job execution: a virtual clock for simulation, optional local-process
launching for real runs, and node reachability probing."""

from __future__ import annotations

import enum
import heapq
import itertools
import logging
import os
import signal
import subprocess
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

from .model import Health, JobState
from .store import CasResult, Store

log = logging.getLogger(__name__)


class EventKind(enum.Enum):
    JOB_STARTED = "JobStarted"
    JOB_COMPLETED = "JobCompleted"
    JOB_WALLTIME_EXCEEDED = "JobWalltimeExceeded"
    NODE_SUSPECTED = "NodeSuspected"
    NODE_RECOVERED = "NodeRecovered"


@dataclass(frozen=True)
class ExecutionEvent:
    kind: EventKind
    timestamp: int
    job_id: Optional[int] = None
    node: Optional[str] = None


class VirtualClock:
    """Simulated time plus the future-event list.

    Events fire in timestamp order, ties in insertion order.  Calling the
    clock returns the current time, so it can be handed to the store.
    """

    def __init__(self, now: int = 0):
        self.now = now
        self._heap: list = []
        self._seq = itertools.count()
        self._void: set[int] = set()

    def __call__(self) -> int:
        return self.now

    def schedule(self, event: ExecutionEvent) -> int:
        if event.timestamp < self.now:
            raise ValueError("cannot schedule an event in the past (%d < %d)"
                             % (event.timestamp, self.now))
        token = next(self._seq)
        heapq.heappush(self._heap, (event.timestamp, token, event))
        return token

    def void(self, token: int):
        self._void.add(token)

    def _drop_void(self):
        while self._heap and self._heap[0][1] in self._void:
            self._void.discard(heapq.heappop(self._heap)[1])

    def peek_time(self) -> Optional[int]:
        self._drop_void()
        return self._heap[0][0] if self._heap else None

    def pending(self) -> int:
        self._drop_void()
        return len(self._heap) - len(self._void)

    def advance(self) -> Optional[ExecutionEvent]:
        self._drop_void()
        if not self._heap:
            return None
        ts, _, event = heapq.heappop(self._heap)
        self.now = max(self.now, ts)
        return event

    def advance_to(self, t: int):
        """Move time forward without firing anything."""
        if t > self.now:
            self.now = t


class WallClock:
    """Integer Unix seconds; real mode has no future-event list."""

    def __call__(self) -> int:
        return int(time.time())

    @property
    def now(self) -> int:
        return self()


# -- probing ------------------------------------------------------------------

class ScriptedProber:
    """Reachability from a scripted health schedule.

    ``outages`` holds ``(node, down_from, down_to)`` windows during which a
    node does not answer.  ``latency`` gives per-node answer delays; a probe
    succeeds only when the delay fits inside the timeout.
    """

    def __init__(self, outages: Iterable[tuple[str, int, int]] = (),
                 latency: Optional[dict[str, float]] = None,
                 clock: Optional[Callable[[], int]] = None):
        self.outages = list(outages)
        self.latency = dict(latency or {})
        self.clock = clock or (lambda: 0)

    def __call__(self, node: str, timeout: float) -> bool:
        now = self.clock()
        for name, lo, hi in self.outages:
            if name == node and lo <= now < hi:
                return False
        return self.latency.get(node, 0.0) <= timeout


class CommandProber:
    """Run a connection command; the node is reachable iff it exits 0 in time.

    The template is formatted with ``node`` and ``timeout``, e.g.
    ``"ssh -o ConnectTimeout={timeout} {node} true"``.
    """

    def __init__(self, template: str = "true"):
        self.template = template

    def __call__(self, node: str, timeout: float) -> bool:
        cmd = self.template.format(node=node, timeout=int(timeout))
        try:
            return subprocess.run(cmd, shell=True, timeout=timeout,
                                  stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL
                                  ).returncode == 0
        except subprocess.TimeoutExpired:
            return False


def check_nodes(nodes: Sequence[str], timeout: float,
                prober: Callable[[str, float], bool]) -> dict[str, Health]:
    if timeout < 1:
        raise ValueError("probe timeout must be >= 1 second")
    return {n: Health.ALIVE if prober(n, timeout) else Health.SUSPECTED for n in nodes}


# -- executor -----------------------------------------------------------------

class Executor:
    """Starts, finishes and cancels jobs through store CAS updates.

    In simulation a launched job's end is an event on the virtual clock.  In
    real mode the command runs as a local child process; its exit is
    reported through ``notify("term", job_id)`` and applied by :meth:`reap`.
    """

    def __init__(self, store: Store, clock, notify: Optional[Callable] = None, *,
                 real: bool = False, health_check: bool = False, probe_timeout: float = 5,
                 prober: Optional[Callable[[str, float], bool]] = None):
        self.store = store
        self.clock = clock
        self.notify = notify or (lambda kind, payload=None: None)
        self.real = real
        self.health_check = health_check
        self.probe_timeout = probe_timeout
        self.prober = prober or ScriptedProber(clock=clock)
        self._tokens: dict[int, int] = {}
        self._in_use: dict[int, list[tuple[str, int]]] = {}
        #: every assignment ever started, kept for auditing
        self.launched: dict[int, list[tuple[str, int]]] = {}
        self._procs: dict[int, subprocess.Popen] = {}
        self._exits: dict[int, object] = {}
        self._exit_lock = threading.Lock()

    @property
    def now(self) -> int:
        return self.clock()

    def in_use(self) -> dict[int, list[tuple[str, int]]]:
        """Processor bookkeeping of jobs this executor has started."""
        return {k: list(v) for k, v in self._in_use.items()}

    def check_nodes(self, nodes: Sequence[str], timeout: Optional[float] = None):
        return check_nodes(nodes, timeout or self.probe_timeout, self.prober)

    def launch(self, job_id: int, assignment=None) -> bool:
        """Start a ``toLaunch`` job on its assigned nodes."""
        job = self.store.get_job(job_id)
        if job.state != JobState.TO_LAUNCH:
            return False
        if assignment is None:
            assignment = self.store.assignment(job_id)
        names = [n for n, _ in assignment]
        health = {n.name: n.health for n in self.store.nodes()}
        bad = [n for n in names if health.get(n) != Health.ALIVE]
        if self.health_check and not bad:
            probed = self.check_nodes(names)
            bad = [n for n, h in probed.items() if h != Health.ALIVE]
            for n in bad:
                self.store.set_health(n, Health.SUSPECTED)
        if bad:
            self.store.cas_update_state(job_id, JobState.TO_LAUNCH, JobState.TO_ERROR,
                                        message="node(s) unreachable: %s" % ",".join(bad))
            self.notify("chstate")
            self.notify("scheduling")
            return False

        now = self.now
        if self.store.cas_update_state(job_id, JobState.TO_LAUNCH, JobState.LAUNCHING,
                                       start_time=now) != CasResult.UPDATED:
            return False
        if self.real:
            try:
                self._spawn(job)
            except OSError as exc:
                self.store.cas_update_state(job_id, JobState.LAUNCHING, JobState.TO_ERROR,
                                            stop_time=self.now, message="launch failed: %s" % exc)
                self.notify("chstate")
                return False
        self.store.cas_update_state(job_id, JobState.LAUNCHING, JobState.RUNNING)
        self._in_use[job_id] = list(assignment)
        self.launched[job_id] = list(assignment)
        if not self.real:
            run = job.actual_duration if job.actual_duration is not None else job.max_time
            if run > job.max_time:
                ev = ExecutionEvent(EventKind.JOB_WALLTIME_EXCEEDED, now + job.max_time, job_id)
            else:
                ev = ExecutionEvent(EventKind.JOB_COMPLETED, now + run, job_id)
            self._tokens[job_id] = self.clock.schedule(ev)
        return True

    def _spawn(self, job):
        proc = subprocess.Popen(job.command, shell=True, cwd=job.launching_directory or None,
                                stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
                                start_new_session=True)
        self._procs[job.job_id] = proc
        self.store.update_job(job.job_id, bpid=proc.pid)

        def watch():
            try:
                result = proc.wait(timeout=job.max_time)
            except subprocess.TimeoutExpired:
                _kill(proc)
                result = "walltime"
            with self._exit_lock:
                if job.job_id in self._procs:
                    self._exits[job.job_id] = result
            self.notify("term", job.job_id)

        threading.Thread(target=watch, name="job-%d" % job.job_id, daemon=True).start()

    def finish(self, event: ExecutionEvent) -> bool:
        """Apply a completion or walltime event to the store."""
        job_id = event.job_id
        self._tokens.pop(job_id, None)
        self._in_use.pop(job_id, None)
        now = self.now
        if event.kind == EventKind.JOB_COMPLETED:
            ok = self.store.cas_update_state(job_id, JobState.RUNNING, JobState.TERMINATED,
                                             stop_time=now)
            return ok == CasResult.UPDATED
        if event.kind == EventKind.JOB_WALLTIME_EXCEEDED:
            ok = self.store.cas_update_state(job_id, JobState.RUNNING, JobState.TO_ERROR,
                                             stop_time=now, message="walltime exceeded")
            if ok == CasResult.UPDATED:
                self.store.cas_update_state(job_id, JobState.TO_ERROR, JobState.ERROR)
                return True
            return False
        raise ValueError("not a job end event: %s" % event.kind)

    def reap(self, job_ids: Optional[Iterable[int]] = None) -> list[int]:
        """Apply exits of local processes collected by the watcher threads."""
        with self._exit_lock:
            ids = list(self._exits) if job_ids is None else [i for i in job_ids
                                                            if i in self._exits]
            results = {i: self._exits.pop(i) for i in ids}
            for i in ids:
                self._procs.pop(i, None)
        done = []
        for job_id, result in sorted(results.items()):
            kind = (EventKind.JOB_WALLTIME_EXCEEDED if result == "walltime"
                    else EventKind.JOB_COMPLETED)
            if self.finish(ExecutionEvent(kind, self.now, job_id)):
                if kind == EventKind.JOB_COMPLETED and result:
                    self.store.update_job(job_id, message="exit status %s" % result)
                done.append(job_id)
        return done

    def cancel(self, job_id: int, reason: str = "cancelled") -> bool:
        """Route a job to Error, releasing its processors now."""
        for _ in range(8):
            job = self.store.get_job(job_id)
            if job.state.is_terminal:
                self.store.record_accounting(job_id, "warning",
                                             "cancel ignored: job already %s" % job.state)
                return False
            if job.state != JobState.TO_ERROR:
                extra = {"message": reason}
                if job.start_time is not None:
                    extra["stop_time"] = self.now
                if self.store.cas_update_state(job_id, job.state, JobState.TO_ERROR,
                                               **extra) != CasResult.UPDATED:
                    continue
            token = self._tokens.pop(job_id, None)
            if token is not None:
                self.clock.void(token)
            self._in_use.pop(job_id, None)
            with self._exit_lock:
                proc = self._procs.pop(job_id, None)
                self._exits.pop(job_id, None)
            if proc is not None:
                _kill(proc)
            self.store.cas_update_state(job_id, JobState.TO_ERROR, JobState.ERROR)
            return True
        raise RuntimeError("job %d kept changing state during cancellation" % job_id)

    def shutdown(self):
        with self._exit_lock:
            procs = list(self._procs.values())
        for proc in procs:
            _kill(proc)


def _kill(proc: subprocess.Popen):
    if proc.poll() is not None:
        return
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()
    proc.wait()
