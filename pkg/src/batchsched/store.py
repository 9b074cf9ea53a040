"""Relational-style state store.

The store is the single source of truth and the only medium through which
the other modules communicate. Tables:

* ``jobs``         -- one row per job, keyed by a monotonically increasing id
* ``nodes``        -- cluster description and health
* ``assignments``  -- (job, node, procs) rows for jobs holding processors
* ``reservations`` -- (job, node, procs) rows for accepted advance reservations
* ``flags``        -- jobs whose cancellation has been requested
* ``accounting``   -- append-only event log

Every public operation is atomic with respect to the others.  When the
store is opened on a file, each committing operation rewrites the snapshot
under an inter-process lock and every operation first reloads the file if
another process changed it, so short-lived command-line clients and the
engine daemon see a single coherent state.

Snapshot layout (UTF-8 text, one record per line)::

    #batchsched-store 1
    @<table>\t<column>\t<column>...     section header
    <value>\t<value>...                 row

Values escape backslash, tab and newline as ``\\\\``, ``\\t``, ``\\n``;
a missing value is written ``\\N``.  Timestamps are decimal integers.
The ``@jobs`` columns follow the jobs-table column order, followed by the
simulator extensions ``reservedStart``, ``bestEffort`` and
``actualDuration``.
"""

from __future__ import annotations

import contextlib
import copy
import enum
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Iterator, Optional

from filelock import FileLock

from .model import (
    ACTIVE_STATES,
    Health,
    Job,
    JobState,
    JobType,
    Node,
    PropertyExpr,
    ReservationStatus,
    valid_transition,
)

MAGIC = "#batchsched-store 1"

#: job id used for accounting records about the engine itself
SYSTEM = 0


class StoreError(Exception):
    pass


class UnknownJobError(StoreError, KeyError):
    pass


class IllegalTransitionError(StoreError, ValueError):
    pass


class CasResult(enum.Enum):
    UPDATED = "Updated"
    CONFLICT = "Conflict"


@dataclass(frozen=True)
class AccountingRecord:
    timestamp: int
    job_id: int
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class Occupation:
    job_id: int
    node: str
    procs: int
    start: int
    end: int


@dataclass(frozen=True)
class JobFilter:
    """Conjunction of optional constraints; the empty filter matches all."""

    state: Optional[JobState] = None
    queue_name: Optional[str] = None
    user: Optional[str] = None
    best_effort: Optional[bool] = None
    submitted_from: Optional[int] = None
    submitted_to: Optional[int] = None

    def matches(self, job: Job) -> bool:
        if self.state is not None and job.state != self.state:
            return False
        if self.queue_name is not None and job.queue_name != self.queue_name:
            return False
        if self.user is not None and job.user != self.user:
            return False
        if self.best_effort is not None and job.best_effort != self.best_effort:
            return False
        if self.submitted_from is not None and job.submission_time < self.submitted_from:
            return False
        if self.submitted_to is not None and job.submission_time > self.submitted_to:
            return False
        return True


def _wall_clock() -> int:
    return int(time.time())


class Store:
    def __init__(self, nodes: Iterable[Node] = (), clock: Optional[Callable[[], int]] = None,
                 path: Optional[str] = None):
        self.clock = clock or _wall_clock
        self.path = path
        self._lock = threading.RLock()
        self._flock = FileLock(path + ".lock") if path else None
        self._disk_sig = None
        self._reset()
        for node in nodes:
            self._nodes[node.name] = copy.deepcopy(node)

    def _reset(self):
        self._next_id = 1
        self._jobs: dict[int, Job] = {}
        self._nodes: dict[str, Node] = {}
        self._assignments: dict[int, list[tuple[str, int]]] = {}
        self._reservations: dict[int, list[tuple[str, int]]] = {}
        self._flags: set[int] = set()
        self._log: list[AccountingRecord] = []

    # -- transactions --------------------------------------------------------

    @contextlib.contextmanager
    def _txn(self, write: bool = False) -> Iterator[None]:
        with self._lock:
            if self._flock is None:
                yield
                return
            with self._flock:
                self._refresh()
                yield
                if write:
                    self._write_file()

    def _signature(self):
        try:
            st = os.stat(self.path)
        except FileNotFoundError:
            return None
        return (st.st_mtime_ns, st.st_size, st.st_ino)

    def _refresh(self):
        sig = self._signature()
        if sig is not None and sig != self._disk_sig:
            with open(self.path, encoding="utf-8") as fh:
                self._parse(fh.read())
            self._disk_sig = sig

    def _write_file(self):
        directory = os.path.dirname(os.path.abspath(self.path))
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".store-")
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())
        os.replace(tmp, self.path)
        self._disk_sig = self._signature()

    # -- nodes ---------------------------------------------------------------

    def add_node(self, node: Node):
        with self._txn(write=True):
            if node.name in self._nodes:
                raise StoreError("duplicate node %s" % node.name)
            self._nodes[node.name] = copy.deepcopy(node)

    def nodes(self) -> list[Node]:
        with self._txn():
            return [copy.deepcopy(self._nodes[n]) for n in sorted(self._nodes)]

    def set_health(self, name: str, health: Health):
        with self._txn(write=True):
            self._nodes[name].health = health

    # -- jobs ----------------------------------------------------------------

    def insert_job(self, job: Job) -> int:
        """Persist a new job and return its fresh identifier."""
        if job.state != JobState.WAITING:
            raise StoreError("new jobs must be Waiting, got %s" % job.state)
        if job.reservation not in (ReservationStatus.NONE, ReservationStatus.TO_SCHEDULE):
            raise StoreError("new reservation jobs must be toSchedule")
        with self._txn(write=True):
            row = replace(job, job_id=self._next_id)
            self._next_id += 1
            self._jobs[row.job_id] = row
            self._append(row.job_id, "submit", "queue=%s procs=%d" % (row.queue_name, row.procs))
            return row.job_id

    def get_job(self, job_id: int) -> Job:
        with self._txn():
            return replace(self._row(job_id))

    def _row(self, job_id: int) -> Job:
        try:
            return self._jobs[job_id]
        except KeyError:
            raise UnknownJobError(job_id) from None

    def cas_update_state(self, job_id: int, expected: JobState, next_state: JobState,
                         **updates) -> CasResult:
        """Move a job from ``expected`` to ``next_state`` iff it is still in
        ``expected``.  Extra keyword fields are written in the same commit.

        Leaving the processor-holding states drops the job's assignment rows.
        """
        if not valid_transition(expected, next_state):
            raise IllegalTransitionError("%s -> %s" % (expected, next_state))
        if "state" in updates or "job_id" in updates:
            raise StoreError("state and job_id cannot be set through updates")
        with self._txn(write=True):
            row = self._row(job_id)
            if row.state != expected:
                return CasResult.CONFLICT
            row.state = next_state
            for key, value in updates.items():
                setattr(row, key, value)
            if next_state not in ACTIVE_STATES:
                self._assignments.pop(job_id, None)
            if next_state.is_terminal:
                self._flags.discard(job_id)
                self._reservations.pop(job_id, None)
            self._append(job_id, "state", "%s->%s" % (expected, next_state))
            return CasResult.UPDATED

    def update_job(self, job_id: int, **fields):
        """Write non-state fields of a job."""
        if "state" in fields or "job_id" in fields:
            raise StoreError("use cas_update_state to change state")
        with self._txn(write=True):
            row = self._row(job_id)
            for key, value in fields.items():
                if not hasattr(row, key):
                    raise AttributeError(key)
                setattr(row, key, value)

    def query_jobs(self, flt: JobFilter = JobFilter()) -> list[Job]:
        with self._txn():
            return [replace(self._jobs[i]) for i in sorted(self._jobs)
                    if flt.matches(self._jobs[i])]

    # -- assignments, reservations, flags -----------------------------------

    def set_assignment(self, job_id: int, pairs: Iterable[tuple[str, int]]):
        with self._txn(write=True):
            row = self._row(job_id)
            if row.state not in ACTIVE_STATES:
                raise StoreError("job %d in %s cannot hold processors" % (job_id, row.state))
            pairs = [(n, int(p)) for n, p in pairs]
            for name, procs in pairs:
                if name not in self._nodes:
                    raise StoreError("unknown node %s" % name)
                if not 1 <= procs <= self._nodes[name].capacity:
                    raise StoreError("procs %d out of range on %s" % (procs, name))
            self._assignments[job_id] = pairs

    def assignment(self, job_id: int) -> list[tuple[str, int]]:
        with self._txn():
            return list(self._assignments.get(job_id, ()))

    def assignments(self) -> dict[int, list[tuple[str, int]]]:
        with self._txn():
            return {k: list(v) for k, v in sorted(self._assignments.items())}

    def set_reservation(self, job_id: int, start: int, pairs: Iterable[tuple[str, int]]):
        """Record the fixed slot of an accepted reservation."""
        with self._txn(write=True):
            row = self._row(job_id)
            row.reserved_start = start
            self._reservations[job_id] = [(n, int(p)) for n, p in pairs]

    def reservation(self, job_id: int) -> list[tuple[str, int]]:
        with self._txn():
            return list(self._reservations.get(job_id, ()))

    def take_reservation(self, job_id: int) -> list[tuple[str, int]]:
        with self._txn(write=True):
            return self._reservations.pop(job_id, [])

    def flag_cancellation(self, job_id: int, reason: str = ""):
        with self._txn(write=True):
            row = self._row(job_id)
            if row.state.is_terminal:
                return
            self._flags.add(job_id)
            self._append(job_id, "flag", reason)

    def flagged(self) -> list[int]:
        with self._txn():
            return sorted(self._flags)

    def clear_flag(self, job_id: int):
        with self._txn(write=True):
            self._flags.discard(job_id)

    def snapshot_occupations(self, now: int) -> list[Occupation]:
        """Processor holds that any new plan must respect.

        Jobs in ``toLaunch`` (assigned but not yet started) are reported as
        starting at ``now``.
        """
        out = []
        with self._txn():
            for job_id in sorted(self._jobs):
                job = self._jobs[job_id]
                if job.state in ACTIVE_STATES and job_id in self._assignments:
                    start = job.start_time if job.start_time is not None else now
                    for name, procs in self._assignments[job_id]:
                        out.append(Occupation(job_id, name, procs, start, start + job.max_time))
                elif (job.reservation == ReservationStatus.SCHEDULED
                      and job.state == JobState.WAITING and job_id in self._reservations):
                    start = job.reserved_start
                    for name, procs in self._reservations[job_id]:
                        out.append(Occupation(job_id, name, procs, start, start + job.max_time))
        return out

    # -- accounting ------------------------------------------------------------

    def _append(self, job_id: int, kind: str, detail: str):
        self._log.append(AccountingRecord(int(self.clock()), job_id, kind, detail))

    def record_accounting(self, job_id: int, kind: str, detail: str = ""):
        with self._txn(write=True):
            if job_id != SYSTEM:
                self._row(job_id)
            self._append(job_id, kind, detail)

    def accounting(self, job_id: Optional[int] = None) -> list[AccountingRecord]:
        with self._txn():
            if job_id is None:
                return list(self._log)
            return [r for r in self._log if r.job_id == job_id]

    # -- persistence -----------------------------------------------------------

    JOB_COLUMNS = (
        "idJob", "jobType", "infoType", "state", "reservation", "message", "user",
        "nbNodes", "weight", "command", "bpid", "queueName", "maxTime", "properties",
        "launchingDirectory", "submissionTime", "startTime", "stopTime",
        "reservedStart", "bestEffort", "actualDuration",
    )

    def dumps(self) -> str:
        with self._lock:
            lines = [MAGIC, "@meta\tkey\tvalue", _row_text(["nextId", self._next_id])]
            lines.append("@nodes\tname\tcapacity\thealth\tproperties")
            for name in sorted(self._nodes):
                n = self._nodes[name]
                lines.append(_row_text([n.name, n.capacity, n.health.value,
                                        json.dumps(n.properties, sort_keys=True)]))
            lines.append("@jobs\t" + "\t".join(self.JOB_COLUMNS))
            for job_id in sorted(self._jobs):
                lines.append(_row_text(_job_values(self._jobs[job_id])))
            for table, source in (("assignments", self._assignments),
                                  ("reservations", self._reservations)):
                lines.append("@%s\tidJob\tnodeName\tprocsUsed" % table)
                for job_id in sorted(source):
                    for name, procs in source[job_id]:
                        lines.append(_row_text([job_id, name, procs]))
            lines.append("@flags\tidJob")
            for job_id in sorted(self._flags):
                lines.append(_row_text([job_id]))
            lines.append("@accounting\ttimestamp\tidJob\teventKind\tdetail")
            for r in self._log:
                lines.append(_row_text([r.timestamp, r.job_id, r.kind, r.detail]))
            return "\n".join(lines) + "\n"

    def _parse(self, text: str):
        self._reset()
        lines = text.split("\n")
        if not lines or lines[0] != MAGIC:
            raise StoreError("not a store snapshot")
        section = None
        for line in lines[1:]:
            if not line:
                continue
            if line.startswith("@"):
                section = line[1:].split("\t")[0]
                continue
            v = [_unescape(f) for f in line.split("\t")]
            if section == "meta":
                if v[0] == "nextId":
                    self._next_id = int(v[1])
            elif section == "nodes":
                self._nodes[v[0]] = Node(v[0], int(v[1]), Health(v[2]), json.loads(v[3]))
            elif section == "jobs":
                job = _job_from_values(v)
                self._jobs[job.job_id] = job
            elif section == "assignments":
                self._assignments.setdefault(int(v[0]), []).append((v[1], int(v[2])))
            elif section == "reservations":
                self._reservations.setdefault(int(v[0]), []).append((v[1], int(v[2])))
            elif section == "flags":
                self._flags.add(int(v[0]))
            elif section == "accounting":
                self._log.append(AccountingRecord(int(v[0]), int(v[1]), v[2], v[3]))
            else:
                raise StoreError("unknown section %r" % section)

    @classmethod
    def loads(cls, text: str, clock=None) -> "Store":
        store = cls(clock=clock)
        store._parse(text)
        return store

    def save(self, path: str):
        with self._lock, open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path: str, clock=None) -> "Store":
        with open(path, encoding="utf-8") as fh:
            return cls.loads(fh.read(), clock=clock)

    @classmethod
    def open(cls, path: str, nodes: Iterable[Node] = (), clock=None,
             recover: bool = True) -> "Store":
        """Open (or create) a file-backed store.

        With ``recover``, jobs left holding processors by a previous engine
        are moved to ``toError``: their execution state is unknown.
        """
        store = cls(clock=clock, path=path)
        with store._txn(write=not os.path.exists(path)):
            if not store._jobs and not store._nodes:
                for node in nodes:
                    store._nodes[node.name] = copy.deepcopy(node)
        if recover:
            for job in store.query_jobs():
                if job.state in ACTIVE_STATES:
                    store.cas_update_state(job.job_id, job.state, JobState.TO_ERROR,
                                           message="engine restarted while job was %s" % job.state)
        return store


def _escape(value) -> str:
    if value is None:
        return "\\N"
    text = str(value)
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> Optional[str]:
    if text == "\\N":
        return None
    out, i = [], 0
    while i < len(text):
        c = text[i]
        if c == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def _row_text(values) -> str:
    return "\t".join(_escape(v) for v in values)


def _opt_int(v):
    return None if v is None else int(v)


def _job_values(j: Job) -> list:
    return [
        j.job_id, j.job_type.value, j.info_type, j.state.value, j.reservation.value,
        j.message, j.user, j.nb_nodes, j.weight, j.command, j.bpid, j.queue_name,
        j.max_time, str(j.properties), j.launching_directory, j.submission_time,
        j.start_time, j.stop_time, j.reserved_start, int(j.best_effort), j.actual_duration,
    ]


def _job_from_values(v: list) -> Job:
    return Job(
        job_id=int(v[0]), job_type=JobType(v[1]), info_type=v[2] or "",
        state=JobState(v[3]), reservation=ReservationStatus(v[4]), message=v[5] or "",
        user=v[6], nb_nodes=int(v[7]), weight=int(v[8]), command=v[9], bpid=_opt_int(v[10]),
        queue_name=v[11], max_time=int(v[12]), properties=PropertyExpr.parse(v[13]),
        launching_directory=v[14], submission_time=int(v[15]), start_time=_opt_int(v[16]),
        stop_time=_opt_int(v[17]), reserved_start=_opt_int(v[18]), best_effort=v[19] == "1",
        actual_duration=_opt_int(v[20]),
    )
