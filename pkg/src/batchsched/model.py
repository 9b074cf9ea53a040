"""Domain types shared by every module: jobs, nodes, queues, the job state
machine and resource property matching.

Everything here is a plain value type or a pure function.
"""

from __future__ import annotations

import enum
import operator
import re
from dataclasses import dataclass, field
from typing import Any, Optional


class JobState(str, enum.Enum):
    WAITING = "Waiting"
    HOLD = "Hold"
    TO_LAUNCH = "toLaunch"
    TO_ERROR = "toError"
    TO_ACK_RESERVATION = "toAckReservation"
    LAUNCHING = "Launching"
    RUNNING = "Running"
    TERMINATED = "Terminated"
    ERROR = "Error"

    def __str__(self) -> str:
        return self.value

    @property
    def is_terminal(self) -> bool:
        return self in (JobState.TERMINATED, JobState.ERROR)


class ReservationStatus(str, enum.Enum):
    NONE = "None"
    TO_SCHEDULE = "toSchedule"
    SCHEDULED = "Scheduled"

    def __str__(self) -> str:
        return self.value


class JobType(str, enum.Enum):
    INTERACTIVE = "INTERACTIVE"
    PASSIVE = "PASSIVE"

    def __str__(self) -> str:
        return self.value


class Health(str, enum.Enum):
    ALIVE = "Alive"
    SUSPECTED = "Suspected"
    DEAD = "Dead"

    def __str__(self) -> str:
        return self.value


class Policy(str, enum.Enum):
    """Ordering of waiting jobs inside one queue."""

    FIFO = "FIFO"
    #: smallest total processor demand first
    SAF = "SAF"

    def __str__(self) -> str:
        return self.value


S = JobState

TRANSITIONS: dict[JobState, frozenset[JobState]] = {
    S.WAITING: frozenset({S.HOLD, S.TO_LAUNCH, S.TO_ACK_RESERVATION, S.TO_ERROR}),
    S.HOLD: frozenset({S.WAITING, S.TO_ERROR}),
    S.TO_ACK_RESERVATION: frozenset({S.WAITING, S.TO_ERROR}),
    S.TO_LAUNCH: frozenset({S.LAUNCHING, S.TO_ERROR}),
    S.LAUNCHING: frozenset({S.RUNNING, S.TO_ERROR}),
    S.RUNNING: frozenset({S.TERMINATED, S.TO_ERROR}),
    S.TO_ERROR: frozenset({S.ERROR}),
    S.TERMINATED: frozenset(),
    S.ERROR: frozenset(),
}

INITIAL_STATE = JobState.WAITING

#: states whose jobs hold processors on nodes
ACTIVE_STATES = frozenset({S.TO_LAUNCH, S.LAUNCHING, S.RUNNING})


def valid_transition(src: JobState, dst: JobState) -> bool:
    """True iff ``src -> dst`` is an edge of the job state diagram."""
    return dst in TRANSITIONS.get(src, frozenset())


# -- resource properties ----------------------------------------------------

_OPS = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    "<=": operator.le,
    ">": operator.gt,
    ">=": operator.ge,
}
_OP_ALIASES = {"==": "=", "<>": "!=", "≠": "!=", "≤": "<=", "≥": ">="}

_ATOM_RE = re.compile(r"^\s*([A-Za-z_][\w.-]*)\s*(==|!=|<>|<=|>=|≠|≤|≥|=|<|>)\s*([^<>=!≠≤≥\s].*?)\s*$")
_AND_RE = re.compile(r"\s+and\s+|\s*&&\s*|\s*,\s*", re.IGNORECASE)


def parse_literal(text: str) -> Any:
    """Integer, float, boolean, or string (quotes optional)."""
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "'\"":
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def format_literal(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    return "'%s'" % value


@dataclass(frozen=True)
class Atom:
    key: str
    op: str
    value: Any

    def __post_init__(self):
        op = _OP_ALIASES.get(self.op, self.op)
        if op not in _OPS:
            raise ValueError("unknown comparison operator %r" % self.op)
        object.__setattr__(self, "op", op)

    def holds(self, props: dict[str, Any]) -> bool:
        if self.key not in props:
            return False
        left, right = props[self.key], self.value
        # bool is an int subclass; keep the kinds apart
        kinds = {type(left) is bool, type(right) is bool}
        if len(kinds) > 1:
            return self.op == "!="
        if isinstance(left, str) != isinstance(right, str):
            return self.op == "!="
        return bool(_OPS[self.op](left, right))

    def __str__(self) -> str:
        return "%s %s %s" % (self.key, self.op, format_literal(self.value))


@dataclass(frozen=True)
class PropertyExpr:
    """Conjunction of comparisons against node properties.

    The empty conjunction matches every node.
    """

    atoms: tuple[Atom, ...] = ()

    @classmethod
    def parse(cls, text: Optional[str]) -> "PropertyExpr":
        """Parse ``"switch = 's1' AND mem >= 256"``.

        Atoms may be separated by ``AND``, ``&&`` or commas.
        """
        if text is None or not text.strip():
            return cls()
        atoms = []
        for part in _AND_RE.split(text.strip()):
            m = _ATOM_RE.match(part)
            if m is None:
                raise ValueError("cannot parse property atom %r" % part)
            atoms.append(Atom(m.group(1), m.group(2), parse_literal(m.group(3))))
        return cls(tuple(atoms))

    def matches(self, props: dict[str, Any]) -> bool:
        return all(atom.holds(props) for atom in self.atoms)

    def __bool__(self) -> bool:
        return bool(self.atoms)

    def __str__(self) -> str:
        return " AND ".join(str(a) for a in self.atoms)


def eval_property(expr: PropertyExpr, node: "Node") -> bool:
    return expr.matches(node.properties)


# -- entities ----------------------------------------------------------------

@dataclass
class Node:
    name: str
    capacity: int = 1
    health: Health = Health.ALIVE
    properties: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("node %s: capacity must be >= 1" % self.name)


@dataclass
class Queue:
    name: str
    priority: int = 0
    policy: Policy = Policy.FIFO
    active: bool = True
    best_effort: bool = False


@dataclass
class Job:
    """One row of the jobs table."""

    user: str
    command: str
    job_id: Optional[int] = None
    job_type: JobType = JobType.PASSIVE
    info_type: str = ""
    state: JobState = JobState.WAITING
    reservation: ReservationStatus = ReservationStatus.NONE
    reserved_start: Optional[int] = None
    message: str = ""
    nb_nodes: int = 1
    weight: int = 1
    bpid: Optional[int] = None
    queue_name: str = "default"
    max_time: int = 7200
    properties: PropertyExpr = field(default_factory=PropertyExpr)
    launching_directory: str = "."
    submission_time: int = 0
    start_time: Optional[int] = None
    stop_time: Optional[int] = None
    best_effort: bool = False
    actual_duration: Optional[int] = None

    @property
    def procs(self) -> int:
        """Total processors requested."""
        return self.nb_nodes * self.weight
