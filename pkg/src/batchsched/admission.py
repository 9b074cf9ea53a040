"""Submission admission: complete and validate requests with an ordered rule
list before they are inserted into the store.

Rules are data.  Each has an optional ``when`` predicate and one action:

* ``SetDefault(field, value)`` -- fill ``field`` when the request left it unset
* ``Reject(message)``          -- refuse the submission; evaluation stops
* ``Transform(field, fn)``     -- ``request.field = fn(request)``
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Optional, Sequence, Union

from .model import (
    Job,
    JobState,
    JobType,
    Node,
    PropertyExpr,
    Queue,
    ReservationStatus,
)


class Rejected(Exception):
    """The submission was refused by an admission rule."""

    def __init__(self, message: str, rule: str = ""):
        super().__init__(message)
        self.message = message
        self.rule = rule


@dataclass
class SubmissionRequest:
    user: str
    command: str
    queue_name: Optional[str] = None
    nb_nodes: Optional[int] = None
    weight: Optional[int] = None
    max_time: Optional[int] = None
    properties: Optional[Union[PropertyExpr, str]] = None
    job_type: Optional[JobType] = None
    info_type: Optional[str] = None
    launching_directory: Optional[str] = None
    best_effort: Optional[bool] = None
    #: desired start of an advance reservation
    reservation_start: Optional[int] = None
    actual_duration: Optional[int] = None


REQUEST_FIELDS = frozenset(f.name for f in fields(SubmissionRequest))


@dataclass(frozen=True)
class Context:
    cluster: tuple[Node, ...]
    queues: dict[str, Queue]
    now: int

    @property
    def total_procs(self) -> int:
        return sum(n.capacity for n in self.cluster)


Predicate = Callable[[SubmissionRequest, Context], bool]


@dataclass(frozen=True)
class SetDefault:
    field: str
    value: Any


@dataclass(frozen=True)
class Reject:
    message: str


@dataclass(frozen=True)
class Transform:
    field: str
    fn: Callable[[SubmissionRequest], Any]


@dataclass(frozen=True)
class AdmissionRule:
    name: str
    action: Union[SetDefault, Reject, Transform]
    when: Optional[Predicate] = None

    def __post_init__(self):
        target = getattr(self.action, "field", None)
        if target is not None and target not in REQUEST_FIELDS:
            raise ValueError("rule %s: unknown request field %r" % (self.name, target))


def default_rules(max_time: int = 7200, queue: str = "default",
                  user_proc_cap: Optional[int] = None) -> list[AdmissionRule]:
    """The stock rule set: fill missing parameters, then refuse requests
    asking for more than the cluster can hold.

    ``user_proc_cap`` defaults to the total processors of the cluster.
    """

    def too_many_procs(req, ctx):
        cap = user_proc_cap if user_proc_cap is not None else ctx.total_procs
        return req.nb_nodes * req.weight > cap

    return [
        AdmissionRule("best-effort-queue", Transform("queue_name", lambda r: "besteffort"),
                      when=lambda r, c: bool(r.best_effort) and r.queue_name is None),
        AdmissionRule("default-queue", SetDefault("queue_name", queue)),
        AdmissionRule("default-nodes", SetDefault("nb_nodes", 1)),
        AdmissionRule("default-weight", SetDefault("weight", 1)),
        AdmissionRule("default-walltime", SetDefault("max_time", max_time)),
        AdmissionRule("positive-sizes", Reject("nb_nodes, weight and max_time must be >= 1"),
                      when=lambda r, c: min(r.nb_nodes, r.weight, r.max_time) < 1),
        AdmissionRule("too-many-nodes", Reject("more nodes requested than the cluster has"),
                      when=lambda r, c: r.nb_nodes > len(c.cluster)),
        AdmissionRule("too-many-procs", Reject("too many processors requested at once"),
                      when=too_many_procs),
        AdmissionRule("node-too-small", Reject("no node has enough processors for the weight"),
                      when=lambda r, c: all(n.capacity < r.weight for n in c.cluster)),
        AdmissionRule("reservation-in-past", Reject("reservation start is in the past"),
                      when=lambda r, c: r.reservation_start is not None
                      and r.reservation_start < c.now),
    ]


def admit(request: SubmissionRequest, rules: Sequence[AdmissionRule],
          cluster: Sequence[Node], queues: Sequence[Queue], now: int = 0) -> Job:
    """Apply ``rules`` in order and build a Waiting job.

    Raises :class:`Rejected` with the first rejecting rule's message.  The
    request object itself is left untouched.
    """
    if not request.command or not request.user:
        raise Rejected("command and user are required")
    ctx = Context(tuple(cluster), {q.name: q for q in queues}, now)
    req = replace(request)
    for rule in rules:
        if rule.when is not None and not rule.when(req, ctx):
            continue
        action = rule.action
        if isinstance(action, Reject):
            raise Rejected(action.message, rule.name)
        if isinstance(action, SetDefault):
            if getattr(req, action.field) is None:
                setattr(req, action.field, action.value)
        elif isinstance(action, Transform):
            setattr(req, action.field, action.fn(req))
        else:
            raise TypeError("unknown admission action %r" % (action,))

    queue = ctx.queues.get(req.queue_name)
    if queue is None:
        raise Rejected("unknown queue %r" % req.queue_name, "queue-exists")
    if req.best_effort and not queue.best_effort:
        raise Rejected("best-effort jobs must go to a best-effort queue", "best-effort")
    for name in ("nb_nodes", "weight", "max_time"):
        if getattr(req, name) is None:
            raise Rejected("%s has no value after defaulting" % name, "complete")

    props = req.properties
    if isinstance(props, str) or props is None:
        try:
            props = PropertyExpr.parse(props)
        except ValueError as exc:
            raise Rejected(str(exc), "properties") from None

    reserving = req.reservation_start is not None
    return Job(
        user=req.user,
        command=req.command,
        job_type=req.job_type or JobType.PASSIVE,
        info_type=req.info_type or "",
        state=JobState.WAITING,
        reservation=ReservationStatus.TO_SCHEDULE if reserving else ReservationStatus.NONE,
        reserved_start=req.reservation_start,
        nb_nodes=int(req.nb_nodes),
        weight=int(req.weight),
        queue_name=queue.name,
        max_time=int(req.max_time),
        properties=props,
        launching_directory=req.launching_directory or ".",
        submission_time=now,
        best_effort=queue.best_effort,
        actual_duration=req.actual_duration,
    )
