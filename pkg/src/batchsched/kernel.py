"""Central automaton.

The kernel reads a coalescing buffer of notifications and a set of periodic
deadlines, and runs one task per :meth:`Kernel.step`:

* ``scheduling`` -- launch due reservations, place new reservations, run a
  scheduling pass and record its decisions in the store
* ``chstate``    -- cancellations, launches of ``toLaunch`` jobs, and
  finalisation of ``toError`` jobs
* ``term``       -- apply the exit of a locally executed job (real mode)
* ``monitoring`` -- probe nodes and update their health

Every task class also runs periodically, so a lost notification only
delays work.  In simulation the periodic deadlines fall on exact multiples
of their period on the virtual clock.
"""

from __future__ import annotations

import enum
import heapq
import logging
import os
import socket
import socketserver
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Optional

from .admission import SubmissionRequest, admit
from .config import KernelConfig
from .executor import CommandProber, EventKind, Executor, ScriptedProber, VirtualClock, WallClock
from .model import Health, JobState, JobType, ReservationStatus
from .scheduler import Verdict, build_timeline, place_reservation, schedule_pass
from .store import SYSTEM, CasResult, JobFilter, Store

log = logging.getLogger(__name__)


class NotificationKind(str, enum.Enum):
    SCHEDULING = "scheduling"
    TERM = "term"
    CHSTATE = "chstate"
    MONITORING = "monitoring"
    SHUTDOWN = "shutdown"


@dataclass(frozen=True)
class Notification:
    kind: NotificationKind
    payload: Optional[int] = None


class NotificationBuffer:
    """FIFO of pending notifications, at most one per (kind, payload)."""

    def __init__(self):
        self._items: OrderedDict[Notification, None] = OrderedDict()
        self._cond = threading.Condition()

    def put(self, note: Notification) -> bool:
        with self._cond:
            if note in self._items:
                return False
            self._items[note] = None
            self._cond.notify_all()
            return True

    def pop(self) -> Optional[Notification]:
        with self._cond:
            if not self._items:
                return None
            return self._items.popitem(last=False)[0]

    def wait(self, timeout: float) -> bool:
        with self._cond:
            if not self._items:
                self._cond.wait(timeout)
            return bool(self._items)

    def pending(self) -> list[Notification]:
        with self._cond:
            return list(self._items)

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


@dataclass(frozen=True)
class TaskRun:
    task: str
    trigger: str  # "deadline", "notification" or "timer"


class SimulationStalled(RuntimeError):
    def __init__(self, jobs):
        self.jobs = jobs
        super().__init__("step budget exhausted with non-terminal jobs: %s"
                         % ", ".join("%d(%s)" % (j.job_id, j.state) for j in jobs))


_PERIODIC = ("scheduling", "chstate", "monitoring")


class Kernel:
    def __init__(self, store: Store, config: KernelConfig, clock=None, *,
                 prober=None, drop: Optional[Callable[[Notification], bool]] = None):
        self.store = store
        self.config = config
        self.real = config.mode == "real"
        if clock is None:
            clock = WallClock() if self.real else VirtualClock()
        self.clock = clock
        if prober is None:
            prober = CommandProber(config.probe_command) if self.real else ScriptedProber(clock=clock)
        self.executor = Executor(store, clock, self.notify, real=self.real,
                                 health_check=config.health_check,
                                 probe_timeout=config.probe_timeout, prober=prober)
        self.buffer = NotificationBuffer()
        #: test hook: notifications for which this returns True are lost
        self.drop = drop
        self._timers: list[int] = []
        self._timer_set: set[int] = set()
        self._scheduling = False
        self.failures: list[str] = []
        self.stopping = False
        now = self.clock()
        self.deadlines = {
            "scheduling": self._next_multiple(now, config.scheduling_period),
            "chstate": self._next_multiple(now, config.scheduling_period),
            "monitoring": self._next_multiple(now, config.monitoring_period),
        }

    @staticmethod
    def _next_multiple(now: int, period: int) -> int:
        return (now // period + 1) * period

    def _period(self, task: str) -> int:
        if task == "monitoring":
            return self.config.monitoring_period
        return self.config.scheduling_period

    # -- notifications -------------------------------------------------------

    def notify(self, kind, payload: Optional[int] = None) -> bool:
        """Queue a notification unless an identical one is already pending."""
        note = Notification(NotificationKind(kind), payload)
        if self.drop is not None and self.drop(note):
            log.debug("notification lost: %s", note)
            return False
        return self.buffer.put(note)

    def set_timer(self, at: int):
        """Request a scheduling task at time ``at``."""
        if at not in self._timer_set:
            self._timer_set.add(at)
            heapq.heappush(self._timers, at)

    def next_timer(self) -> Optional[int]:
        return self._timers[0] if self._timers else None

    # -- automaton -----------------------------------------------------------

    def step(self) -> Optional[TaskRun]:
        """Run exactly one task; None when nothing is due."""
        now = self.clock()
        due = [(t, name) for name, t in self.deadlines.items() if t <= now]
        if due:
            _, name = min(due, key=lambda d: (d[0], _PERIODIC.index(d[1])))
            period = self._period(name)
            self.deadlines[name] = self._next_multiple(now, period)
            self._run(name, None)
            return TaskRun(name, "deadline")
        if self._timers and self._timers[0] <= now:
            while self._timers and self._timers[0] <= now:
                self._timer_set.discard(heapq.heappop(self._timers))
            self._run("scheduling", None)
            return TaskRun("scheduling", "timer")
        note = self.buffer.pop()
        if note is None:
            return None
        if note.kind == NotificationKind.SHUTDOWN:
            self.stopping = True
            return TaskRun("shutdown", "notification")
        self._run(note.kind.value, note.payload)
        return TaskRun(note.kind.value, "notification")

    def _run(self, task: str, payload):
        try:
            if task == "scheduling":
                self._task_scheduling()
            elif task == "chstate":
                self._task_chstate()
            elif task == "term":
                self._task_term(payload)
            elif task == "monitoring":
                self._task_monitoring()
            else:
                raise ValueError("unknown task %s" % task)
        except Exception as exc:
            log.exception("task %s failed", task)
            self.failures.append("%s: %s" % (task, exc))
            self.store.record_accounting(SYSTEM, "task-failure", "%s: %r" % (task, exc))

    def _task_scheduling(self):
        if self._scheduling:
            raise RuntimeError("scheduling task re-entered")
        self._scheduling = True
        try:
            self._schedule()
        finally:
            self._scheduling = False

    def _schedule(self):
        store, now = self.store, self.clock()
        waiting = store.query_jobs(JobFilter(state=JobState.WAITING))
        changed = False

        for job in waiting:
            if (job.reservation == ReservationStatus.SCHEDULED
                    and job.reserved_start is not None and job.reserved_start <= now):
                pairs = store.reservation(job.job_id)
                if store.cas_update_state(job.job_id, JobState.WAITING,
                                          JobState.TO_LAUNCH) == CasResult.UPDATED:
                    store.set_assignment(job.job_id, pairs)
                    store.take_reservation(job.job_id)
                    changed = True

        timeline = build_timeline(now, store.snapshot_occupations(now), store.nodes())

        for job in waiting:
            if job.reservation != ReservationStatus.TO_SCHEDULE:
                continue
            decision = place_reservation(timeline, job, job.reserved_start)
            if decision.verdict == Verdict.PLANNED_AT:
                self._acknowledge_reservation(job.job_id, decision)
            else:
                store.cas_update_state(job.job_id, JobState.WAITING, JobState.TO_ERROR,
                                       message="reservation rejected: " + decision.message)
                changed = True

        regular = [j for j in waiting if j.reservation == ReservationStatus.NONE]
        running_be = store.query_jobs(JobFilter(state=JobState.RUNNING, best_effort=True))
        decisions = schedule_pass(self.config.queues, regular, timeline, now,
                                  running_be, self.config.victim_policy)
        next_start = None
        for d in decisions:
            if d.verdict == Verdict.LAUNCH_NOW:
                if store.cas_update_state(d.job_id, JobState.WAITING,
                                          JobState.TO_LAUNCH) == CasResult.UPDATED:
                    store.set_assignment(d.job_id, d.assignment)
                    changed = True
            elif d.verdict == Verdict.PLANNED_AT:
                if d.start > now and (next_start is None or d.start < next_start):
                    next_start = d.start
            elif d.verdict == Verdict.REJECT:
                store.cas_update_state(d.job_id, JobState.WAITING, JobState.TO_ERROR,
                                       message=d.message)
                changed = True
            elif d.verdict == Verdict.FLAG_FOR_CANCELLATION:
                store.flag_cancellation(d.job_id, d.message)
                changed = True
        if next_start is not None:
            self.set_timer(next_start)
        if changed:
            # launches and cancellations go out right away, ChState only
            # finalizes toError jobs and backs this up if it fails midway
            if self._dispatch():
                self.notify(NotificationKind.SCHEDULING)
            self.notify(NotificationKind.CHSTATE)

    def _acknowledge_reservation(self, job_id: int, decision):
        store = self.store
        if store.cas_update_state(job_id, JobState.WAITING,
                                  JobState.TO_ACK_RESERVATION) != CasResult.UPDATED:
            return
        store.set_reservation(job_id, decision.start, decision.assignment)
        if not self.config.auto_ack_reservations:
            return
        store.cas_update_state(job_id, JobState.TO_ACK_RESERVATION, JobState.WAITING,
                               reservation=ReservationStatus.SCHEDULED)
        if decision.start <= self.clock():
            self.notify(NotificationKind.SCHEDULING)
        else:
            self.set_timer(decision.start)

    def acknowledge(self, job_id: int, accept: bool = True) -> bool:
        """Client answer to a reservation waiting in ``toAckReservation``."""
        job = self.store.get_job(job_id)
        if job.state != JobState.TO_ACK_RESERVATION:
            return False
        if accept:
            ok = self.store.cas_update_state(job_id, JobState.TO_ACK_RESERVATION,
                                             JobState.WAITING,
                                             reservation=ReservationStatus.SCHEDULED)
            if ok == CasResult.UPDATED:
                self.set_timer(max(job.reserved_start, self.clock()))
        else:
            ok = self.store.cas_update_state(job_id, JobState.TO_ACK_RESERVATION,
                                             JobState.TO_ERROR,
                                             message="reservation not acknowledged")
            self.notify(NotificationKind.CHSTATE)
        return ok == CasResult.UPDATED

    def _dispatch(self) -> bool:
        """Cancel flagged jobs and start toLaunch ones; True if resources were freed."""
        store, ex = self.store, self.executor
        freed = False
        for job_id in store.flagged():
            ex.cancel(job_id, store.get_job(job_id).message or "cancellation requested")
            freed = True
        for job in store.query_jobs(JobFilter(state=JobState.TO_LAUNCH)):
            ex.launch(job.job_id)
        return freed

    def _task_chstate(self):
        store, ex = self.store, self.executor
        freed = False
        if self.real:
            freed |= bool(ex.reap())
        freed |= self._dispatch()
        for job in store.query_jobs(JobFilter(state=JobState.TO_ERROR)):
            extra = {}
            if job.start_time is not None and job.stop_time is None:
                extra["stop_time"] = self.clock()
            store.cas_update_state(job.job_id, JobState.TO_ERROR, JobState.ERROR, **extra)
            freed = True
        if freed:
            self.notify(NotificationKind.SCHEDULING)

    def _task_term(self, job_id):
        if self.executor.reap(None if job_id is None else [job_id]):
            self.notify(NotificationKind.SCHEDULING)

    def _task_monitoring(self):
        nodes = self.store.nodes()
        result = self.executor.check_nodes([n.name for n in nodes])
        recovered = False
        for node in nodes:
            health = result[node.name]
            if health != node.health and node.health != Health.DEAD:
                self.store.set_health(node.name, health)
                self.store.record_accounting(SYSTEM, "node-health",
                                             "%s %s->%s" % (node.name, node.health, health))
                recovered |= health == Health.ALIVE
        if self.real and self.executor.reap():
            recovered = True
        if recovered:
            self.notify(NotificationKind.SCHEDULING)

    # -- client side -----------------------------------------------------------

    def submit(self, request: SubmissionRequest) -> int:
        """Admit, insert and announce a job; raises ``Rejected``."""
        job_id = submit_job(self.store, self.config, request, self.clock(),
                            simulated=not self.real)
        self.notify(NotificationKind.SCHEDULING)
        return job_id

    def delete(self, job_id: int) -> bool:
        """Request cancellation; False when the job is already terminal."""
        if request_cancellation(self.store, job_id):
            self.notify(NotificationKind.CHSTATE)
            return True
        return False

    # -- simulation driver --------------------------------------------------------

    def handle_event(self, event):
        if event.kind in (EventKind.JOB_COMPLETED, EventKind.JOB_WALLTIME_EXCEEDED):
            self.executor.finish(event)
            self.notify(NotificationKind.SCHEDULING)

    def non_terminal(self):
        return [j for j in self.store.query_jobs() if not j.state.is_terminal]

    def quiescent(self) -> bool:
        return (self.clock.pending() == 0 and len(self.buffer) == 0
                and not self.non_terminal())

    def run_until_quiescent(self, max_steps: int = 1_000_000,
                            until: Optional[int] = None):
        """Alternate automaton steps and clock advances until nothing is left.

        ``until`` stops the run once the clock would pass that time.
        """
        if self.real:
            raise RuntimeError("run_until_quiescent drives the virtual clock only")
        clock = self.clock
        steps = 0
        while True:
            while self.step() is not None:
                steps += 1
                if steps > max_steps:
                    raise SimulationStalled(self.non_terminal())
            if clock.pending() == 0 and len(self.buffer) == 0:
                if not self.non_terminal():
                    return
            t_event = clock.peek_time()
            candidates = [t for t in (t_event, self.next_timer()) if t is not None]
            candidates.append(min(self.deadlines.values()))
            nxt = min(candidates)
            if until is not None and nxt > until:
                clock.advance_to(until)
                return
            if t_event is not None and t_event == nxt:
                while clock.peek_time() == nxt:
                    self.handle_event(clock.advance())
            else:
                clock.advance_to(nxt)
            steps += 1
            if steps > max_steps:
                raise SimulationStalled(self.non_terminal())

    # -- real-mode daemon -----------------------------------------------------------

    def serve_forever(self, poll: float = 1.0):
        while not self.stopping:
            if self.step() is None:
                now = self.clock()
                horizon = min(list(self.deadlines.values())
                              + ([self.next_timer()] if self._timers else []))
                self.buffer.wait(max(0.01, min(poll, horizon - now)))
        self.executor.shutdown()


def submit_job(store: Store, config: KernelConfig, request: SubmissionRequest, now: int,
               simulated: bool = False) -> int:
    job = admit(request, config.admission_rules, store.nodes(), config.queues, now=now)
    interactive = simulated and job.job_type == JobType.INTERACTIVE
    if interactive:
        job.job_type = JobType.PASSIVE
    job_id = store.insert_job(job)
    if interactive:
        store.record_accounting(job_id, "note", "interactive job run as passive in simulation")
    return job_id


def request_cancellation(store: Store, job_id: int) -> bool:
    """Flag a job for the cancellation task.  Raises ``UnknownJobError``."""
    job = store.get_job(job_id)
    if job.state.is_terminal:
        store.record_accounting(job_id, "warning", "delete ignored: job already %s" % job.state)
        return False
    store.update_job(job_id, message="removed by user")
    store.flag_cancellation(job_id, "removed by user")
    return True


# -- notification endpoint ------------------------------------------------------

class EngineUnreachable(ConnectionError):
    pass


def socket_path(state_dir: str) -> str:
    return os.path.join(state_dir, "notify.sock")


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            parts = raw.decode("utf-8", "replace").split()
            if not parts:
                continue
            try:
                payload = int(parts[1]) if len(parts) > 1 else None
                self.server.kernel.notify(parts[0].lower(), payload)
                self.wfile.write(b"ok\n")
            except (ValueError, KeyError) as exc:
                self.wfile.write(("error %s\n" % exc).encode())


class NotificationServer(socketserver.ThreadingUnixStreamServer):
    """Line protocol on a Unix socket: ``<kind> [job_id]`` per line."""

    daemon_threads = True

    def __init__(self, path: str, kernel: Kernel):
        if os.path.exists(path):
            os.unlink(path)
        super().__init__(path, _Handler)
        self.kernel = kernel

    def start(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, name="notify-endpoint", daemon=True)
        t.start()
        return t


def send_notification(state_dir: str, kind: str, payload: Optional[int] = None,
                      timeout: float = 5.0):
    path = socket_path(state_dir)
    line = kind if payload is None else "%s %d" % (kind, payload)
    try:
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
            s.settimeout(timeout)
            s.connect(path)
            s.sendall(line.encode() + b"\n")
            s.shutdown(socket.SHUT_WR)
            reply = s.makefile().readline().strip()
    except OSError as exc:
        raise EngineUnreachable("engine not reachable at %s: %s" % (path, exc)) from None
    if reply != "ok":
        raise EngineUnreachable("engine refused notification: %s" % reply)


def engine_reachable(state_dir: str) -> bool:
    path = socket_path(state_dir)
    try:
        with socket.socket(socket.AF_UNIX, socket.SOCK_STREAM) as s:
            s.settimeout(2.0)
            s.connect(path)
        return True
    except OSError:
        return False
