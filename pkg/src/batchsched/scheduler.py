"""Meta-scheduler: Gantt timeline, slot search, reservations, per-queue
conservative backfilling and best-effort preemption planning.

The scheduler never touches the store.  It is handed a snapshot (the
occupations, the nodes, the waiting jobs) and returns decisions that the
kernel applies.
"""

from __future__ import annotations

import bisect
import enum
import heapq
import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

from .model import Health, Job, Node, Policy, PropertyExpr, Queue, ReservationStatus

INF = math.inf

Assignment = tuple[tuple[str, int], ...]


class OverSubscribed(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    start: int
    end: int
    procs: int
    owner: int


class _Profile:
    """Used processors on one node as a right-open step function.

    ``used[i]`` holds on ``[times[i], times[i+1])``; the last step extends
    to infinity.
    """

    __slots__ = ("times", "used")

    def __init__(self, origin: int):
        self.times = [origin]
        self.used = [0]

    def copy(self) -> "_Profile":
        p = _Profile.__new__(_Profile)
        p.times = list(self.times)
        p.used = list(self.used)
        return p

    def _split(self, t) -> int:
        i = bisect.bisect_right(self.times, t) - 1
        if self.times[i] == t:
            return i
        self.times.insert(i + 1, t)
        self.used.insert(i + 1, self.used[i])
        return i + 1

    def add(self, start: int, end, procs: int):
        lo = self._split(start)
        hi = self._split(end) if end != INF else len(self.times)
        for i in range(lo, hi):
            self.used[i] += procs

    def used_at(self, t) -> int:
        return self.used[bisect.bisect_right(self.times, t) - 1]

    def max_used(self, start, end) -> int:
        i = bisect.bisect_right(self.times, start) - 1
        top = 0
        while i < len(self.times) and self.times[i] < end:
            top = max(top, self.used[i])
            i += 1
        return top

    def windows(self, limit: int) -> list[tuple[int, float]]:
        """Maximal intervals on which ``used <= limit``."""
        out = []
        open_at = None
        for t, u in zip(self.times, self.used):
            if u <= limit:
                if open_at is None:
                    open_at = t
            elif open_at is not None:
                out.append((open_at, t))
                open_at = None
        if open_at is not None:
            out.append((open_at, INF))
        return out


class GanttTimeline:
    """Per-node occupation of processors from ``now`` onward."""

    def __init__(self, now: int, nodes: Iterable[Node]):
        self.now = now
        self.nodes = {n.name: n for n in sorted(nodes, key=lambda n: n.name)}
        self._profiles = {name: _Profile(now) for name in self.nodes}
        self._intervals: dict[str, list[Interval]] = {name: [] for name in self.nodes}
        self._windows: dict[str, dict[int, list]] = {name: {} for name in self.nodes}
        self._eligible: dict = {}

    def copy(self) -> "GanttTimeline":
        tl = GanttTimeline.__new__(GanttTimeline)
        tl.now = self.now
        tl.nodes = self.nodes
        tl._profiles = {k: p.copy() for k, p in self._profiles.items()}
        tl._intervals = {k: list(v) for k, v in self._intervals.items()}
        tl._windows = {k: dict(v) for k, v in self._windows.items()}
        tl._eligible = self._eligible
        return tl

    def free(self, node: str, t: int) -> int:
        return self.nodes[node].capacity - self._profiles[node].used_at(t)

    def intervals(self, node: str) -> list[Interval]:
        return list(self._intervals[node])

    def owned_by(self, owner: int) -> list[tuple[str, Interval]]:
        return [(name, iv) for name, ivs in self._intervals.items() for iv in ivs
                if iv.owner == owner]

    def endpoints(self) -> list[int]:
        pts = {self.now}
        for ivs in self._intervals.values():
            for iv in ivs:
                pts.add(iv.start)
                pts.add(iv.end)
        return sorted(pts)

    def fits(self, node: str, start: int, end: int, procs: int) -> bool:
        cap = self.nodes[node].capacity
        return self._profiles[node].max_used(start, end) + procs <= cap

    def add(self, node: str, start: int, end: int, procs: int, owner: int):
        if node not in self.nodes:
            raise KeyError("unknown node %s" % node)
        start = max(start, self.now)
        if end <= start:
            return
        if not self.fits(node, start, end, procs):
            raise OverSubscribed("node %s over capacity on [%s, %s)" % (node, start, end))
        self._profiles[node].add(start, end, procs)
        self._intervals[node].append(Interval(start, end, procs, owner))
        self._invalidate(node)

    def remove_owner(self, owner: int):
        for name, ivs in self._intervals.items():
            keep = [iv for iv in ivs if iv.owner != owner]
            if len(keep) != len(ivs):
                for iv in ivs:
                    if iv.owner == owner:
                        self._profiles[name].add(iv.start, iv.end, -iv.procs)
                self._intervals[name] = keep
                self._invalidate(name)

    def commit(self, owner: int, start: int, duration: int, assignment: Assignment):
        for name, procs in assignment:
            self.add(name, start, start + duration, procs, owner)

    def _invalidate(self, node: str):
        self._windows[node] = {}

    def start_windows(self, node: str, weight: int) -> list[tuple[int, float]]:
        """Intervals on which ``node`` has at least ``weight`` free processors."""
        cache = self._windows[node]
        w = cache.get(weight)
        if w is None:
            w = cache[weight] = self._profiles[node].windows(self.nodes[node].capacity - weight)
        return w


def build_timeline(now: int, occupations: Iterable, nodes: Iterable[Node]) -> GanttTimeline:
    """Timeline holding exactly ``occupations`` clipped to ``[now, +inf)``.

    Occupations are objects with ``job_id, node, procs, start, end``.
    """
    tl = GanttTimeline(now, nodes)
    for occ in occupations:
        if occ.node not in tl.nodes:
            raise KeyError("occupation of job %s references unknown node %s"
                           % (occ.job_id, occ.node))
        tl.add(occ.node, occ.start, occ.end, occ.procs, occ.job_id)
    return tl


@dataclass(frozen=True)
class SlotRequest:
    nb_nodes: int
    weight: int
    duration: int
    properties: PropertyExpr = field(default_factory=PropertyExpr)
    not_before: int = 0

    def __post_init__(self):
        if self.nb_nodes < 1 or self.weight < 1 or self.duration < 1:
            raise ValueError("nb_nodes, weight and duration must be >= 1")

    @classmethod
    def for_job(cls, job: Job, not_before: int) -> "SlotRequest":
        return cls(job.nb_nodes, job.weight, job.max_time, job.properties, not_before)


def eligible_nodes(timeline: GanttTimeline, request: SlotRequest,
                   alive_only: bool = True) -> list[str]:
    key = (request.properties, request.weight, alive_only)
    names = timeline._eligible.get(key)
    if names is None:
        names = timeline._eligible[key] = [
            name for name, node in timeline.nodes.items()
            if (node.health == Health.ALIVE or not alive_only)
            and node.capacity >= request.weight
            and request.properties.matches(node.properties)]
    return names


def find_earliest_slot(timeline: GanttTimeline, request: SlotRequest
                       ) -> Optional[tuple[int, Assignment]]:
    """Earliest start at which ``nb_nodes`` eligible nodes each keep
    ``weight`` free processors for the whole duration.

    A node can host the job from any instant of its start spans
    ``[window_open, window_close - duration]``.  The optimum is always
    ``not_before`` or the opening of some span, so a sweep over span
    openings is exact.  Ties between nodes are broken by node name.
    """
    names = eligible_nodes(timeline, request)
    nb = request.nb_nodes
    if len(names) < nb:
        return None
    lo_bound = max(request.not_before, timeline.now)
    duration = request.duration
    opens = []
    for idx, name in enumerate(names):
        for a, b in timeline.start_windows(name, request.weight):
            lo = a if a > lo_bound else lo_bound
            hi = b - duration
            if lo <= hi:
                opens.append((lo, idx, hi))
    opens.sort()
    active: dict[int, float] = {}
    closing: list = []
    i, n = 0, len(opens)
    while i < n:
        s = opens[i][0]
        while i < n and opens[i][0] == s:
            _, idx, hi = opens[i]
            active[idx] = hi
            heapq.heappush(closing, (hi, idx))
            i += 1
        while closing and closing[0][0] < s:
            hi, idx = heapq.heappop(closing)
            if active.get(idx) == hi:
                del active[idx]
        if len(active) >= nb:
            chosen = sorted(active)[:nb]
            return s, tuple((names[k], request.weight) for k in chosen)
    return None


class Verdict(enum.Enum):
    LAUNCH_NOW = "LaunchNow"
    PLANNED_AT = "PlannedAt"
    REJECT = "Reject"
    FLAG_FOR_CANCELLATION = "FlagForCancellation"


@dataclass(frozen=True)
class Decision:
    job_id: int
    verdict: Verdict
    start: Optional[int] = None
    assignment: Assignment = ()
    message: str = ""


def place_reservation(timeline: GanttTimeline, job: Job, desired_start: int) -> Decision:
    """Accept the reservation exactly at ``desired_start`` or reject it.

    On success the slot is carved into ``timeline``.
    """
    if job.reservation != ReservationStatus.TO_SCHEDULE:
        raise ValueError("job %s is not a reservation awaiting placement" % job.job_id)
    if desired_start < timeline.now:
        return Decision(job.job_id, Verdict.REJECT, message="reservation start is in the past")
    slot = find_earliest_slot(timeline, SlotRequest.for_job(job, desired_start))
    if slot is None or slot[0] != desired_start:
        return Decision(job.job_id, Verdict.REJECT,
                        message="resources unavailable at %d" % desired_start)
    timeline.commit(job.job_id, desired_start, job.max_time, slot[1])
    return Decision(job.job_id, Verdict.PLANNED_AT, desired_start, slot[1])


def order_jobs(jobs: Iterable[Job], policy: Policy) -> list[Job]:
    if Policy(policy) == Policy.SAF:
        return sorted(jobs, key=lambda j: (j.procs, j.job_id))
    return sorted(jobs, key=lambda j: j.job_id)


# -- best-effort preemption ---------------------------------------------------

def _feasible_without(timeline: GanttTimeline, request: SlotRequest,
                      victims: Iterable[int]) -> bool:
    tl = timeline.copy()
    for v in victims:
        tl.remove_owner(v)
    slot = find_earliest_slot(tl, request)
    return slot is not None and slot[0] == request.not_before


def youngest_first(timeline: GanttTimeline, request: SlotRequest,
                   candidates: Sequence[Job]) -> Optional[set[int]]:
    """Cancel the most recently started jobs first, then drop any victim
    the request turns out not to need."""
    order = sorted(candidates, key=lambda j: (-(j.start_time or 0), -j.job_id))
    chosen: list[int] = []
    for job in order:
        chosen.append(job.job_id)
        if _feasible_without(timeline, request, chosen):
            break
    else:
        return None
    for v in list(chosen[:-1]):
        rest = [c for c in chosen if c != v]
        if _feasible_without(timeline, request, rest):
            chosen = rest
    return set(chosen)


def fewest_victims(timeline: GanttTimeline, request: SlotRequest,
                   candidates: Sequence[Job], max_exhaustive: int = 12) -> Optional[set[int]]:
    """Smallest victim set; among equal sizes, the youngest jobs win."""
    order = sorted(candidates, key=lambda j: (-(j.start_time or 0), -j.job_id))
    if len(order) > max_exhaustive:
        return youngest_first(timeline, request, order)
    ids = [j.job_id for j in order]
    for k in range(1, len(ids) + 1):
        for combo in itertools.combinations(ids, k):
            if _feasible_without(timeline, request, combo):
                return set(combo)
    return None


VICTIM_POLICIES: dict[str, Callable] = {
    "youngest": youngest_first,
    "fewest": fewest_victims,
}


def plan_preemption(timeline: GanttTimeline, request: SlotRequest,
                    running_best_effort: Sequence[Job],
                    policy: str = "youngest") -> Optional[set[int]]:
    """Best-effort jobs to cancel so that ``request`` can start exactly at
    ``request.not_before``; None when no such set exists."""
    candidates = [j for j in running_best_effort
                  if j.best_effort and timeline.owned_by(j.job_id)]
    if not candidates:
        return None
    if not _feasible_without(timeline, request, [j.job_id for j in candidates]):
        return None
    return VICTIM_POLICIES[policy](timeline, request, candidates)


# -- the pass -----------------------------------------------------------------

def schedule_pass(queues: Sequence[Queue], waiting_jobs: Sequence[Job],
                  timeline: GanttTimeline, now: int,
                  running_best_effort: Sequence[Job] = (),
                  victim_policy: str = "youngest") -> list[Decision]:
    """Plan every waiting job, queue by queue in decreasing priority.

    Each job takes the earliest slot left by the jobs planned before it and
    its hold is committed into ``timeline`` (conservative backfilling).
    Non-best-effort jobs that cannot start now may claim the processors of
    running best-effort jobs; those come back as FlagForCancellation
    decisions and the claiming job is held at ``now``, to be launched by
    the next pass once the victims are gone.
    """
    by_queue: dict[str, list[Job]] = {}
    for job in waiting_jobs:
        if job.reservation == ReservationStatus.NONE:
            by_queue.setdefault(job.queue_name, []).append(job)

    preemptible = [j for j in running_best_effort if j.best_effort]
    decisions: list[Decision] = []
    for queue in sorted(queues, key=lambda q: (-q.priority, q.name)):
        if not queue.active:
            continue
        for job in order_jobs(by_queue.get(queue.name, ()), queue.policy):
            request = SlotRequest.for_job(job, now)
            slot = find_earliest_slot(timeline, request)
            if (slot is None or slot[0] > now) and preemptible and not job.best_effort:
                victims = plan_preemption(timeline, request, preemptible, victim_policy)
                if victims:
                    for v in sorted(victims):
                        timeline.remove_owner(v)
                        decisions.append(Decision(v, Verdict.FLAG_FOR_CANCELLATION,
                                                  message="preempted by job %d" % job.job_id))
                    preemptible = [j for j in preemptible if j.job_id not in victims]
                    slot = find_earliest_slot(timeline, request)
                    timeline.commit(job.job_id, slot[0], job.max_time, slot[1])
                    decisions.append(Decision(job.job_id, Verdict.PLANNED_AT, *slot))
                    continue
            if slot is None:
                if len(eligible_nodes(timeline, request, alive_only=False)) >= job.nb_nodes:
                    # blocked only by unhealthy nodes; retry on a later pass
                    continue
                decisions.append(Decision(job.job_id, Verdict.REJECT,
                                          message="no combination of nodes can ever satisfy "
                                                  "%d x %d procs matching [%s]"
                                                  % (job.nb_nodes, job.weight, job.properties)))
                continue
            start, assignment = slot
            timeline.commit(job.job_id, start, job.max_time, assignment)
            verdict = Verdict.LAUNCH_NOW if start == now else Verdict.PLANNED_AT
            decisions.append(Decision(job.job_id, verdict, start, assignment))
    return decisions
