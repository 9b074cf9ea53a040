"""Replayable workload files.

Plain text, one record per line, ``#`` starts a comment.  Fields are
separated by whitespace; the properties of a ``job`` line take the rest of
the line.

::

    node <name> <capacity> [key=value ...]
    down <node> <from> <to>
    job <submit> <type> <queue> <nbNodes> <weight> <actual> <maxTime> <bestEffort> <resStart> [properties]

``type`` is ``P`` (passive) or ``I`` (interactive), ``bestEffort`` is ``0``
or ``1`` and ``resStart`` is a reservation start time or ``-``.  Job lines
must be in non-decreasing submit order.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .model import JobType, Node, PropertyExpr, format_literal, parse_literal


@dataclass(frozen=True)
class WorkloadJob:
    submit_time: int
    nb_nodes: int
    weight: int
    actual_duration: int
    max_time: int
    queue_name: str = "default"
    job_type: JobType = JobType.PASSIVE
    best_effort: bool = False
    reservation_start: Optional[int] = None
    properties: PropertyExpr = field(default_factory=PropertyExpr)

    @property
    def work(self) -> int:
        return self.nb_nodes * self.weight * self.actual_duration


@dataclass
class WorkloadSpec:
    jobs: list[WorkloadJob] = field(default_factory=list)
    nodes: list[Node] = field(default_factory=list)
    #: (node, down_from, down_to)
    outages: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def processors(self) -> int:
        return sum(n.capacity for n in self.nodes)

    @property
    def work(self) -> int:
        return sum(j.work for j in self.jobs)

    def validate(self, queues=None):
        times = [j.submit_time for j in self.jobs]
        if times != sorted(times):
            raise ValueError("job records must be in non-decreasing submit order")
        names = {n.name for n in self.nodes}
        if len(names) != len(self.nodes):
            raise ValueError("duplicate node names")
        for node, _, _ in self.outages:
            if node not in names:
                raise ValueError("outage for unknown node %s" % node)
        if queues is not None:
            known = {q.name for q in queues}
            missing = {j.queue_name for j in self.jobs} - known
            if missing:
                raise ValueError("undeclared queue(s): %s" % ", ".join(sorted(missing)))


def parse_workload(text: str) -> WorkloadSpec:
    spec = WorkloadSpec()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *rest = line.split()
        try:
            if kind == "node":
                props = {}
                for item in rest[2:]:
                    key, _, value = item.partition("=")
                    props[key] = parse_literal(value)
                spec.nodes.append(Node(rest[0], int(rest[1]), properties=props))
            elif kind == "down":
                spec.outages.append((rest[0], int(rest[1]), int(rest[2])))
            elif kind == "job":
                fields_, props = rest[:9], " ".join(rest[9:])
                submit, jtype, queue, nb, w, actual, maxt, be, res = fields_
                spec.jobs.append(WorkloadJob(
                    submit_time=int(submit), nb_nodes=int(nb), weight=int(w),
                    actual_duration=int(actual), max_time=int(maxt), queue_name=queue,
                    job_type=JobType.INTERACTIVE if jtype.upper() == "I" else JobType.PASSIVE,
                    best_effort=be == "1",
                    reservation_start=None if res == "-" else int(res),
                    properties=PropertyExpr.parse(props)))
            else:
                raise ValueError("unknown record kind %r" % kind)
        except (ValueError, IndexError) as exc:
            raise ValueError("workload line %d: %s" % (lineno, exc)) from None
    spec.validate()
    return spec


def format_workload(spec: WorkloadSpec, header: str = "") -> str:
    out = [("# " + line).rstrip() for line in header.splitlines()]
    for n in spec.nodes:
        props = " ".join("%s=%s" % (k, format_literal(v)) for k, v in sorted(n.properties.items()))
        out.append(("node %s %d %s" % (n.name, n.capacity, props)).rstrip())
    for node, lo, hi in spec.outages:
        out.append("down %s %d %d" % (node, lo, hi))
    for j in spec.jobs:
        out.append(("job %d %s %s %d %d %d %d %d %s %s" % (
            j.submit_time, "I" if j.job_type == JobType.INTERACTIVE else "P", j.queue_name,
            j.nb_nodes, j.weight, j.actual_duration, j.max_time, int(j.best_effort),
            "-" if j.reservation_start is None else j.reservation_start,
            j.properties)).rstrip())
    return "\n".join(out) + "\n"


def load_workload(path: str) -> WorkloadSpec:
    with open(path, encoding="utf-8") as fh:
        return parse_workload(fh.read())


# -- ESP-like reconstruction ---------------------------------------------------

#: (type, processors on a 34-processor machine, count, run time in seconds).
#: Sizes are the benchmark's fractions of the machine; run times are the
#: published targets scaled so that the whole mix totals 443340 CPU-seconds.
ESP_TYPES = (
    ("A", 1, 75, 335), ("B", 2, 9, 402), ("C", 17, 3, 668), ("D", 8, 3, 770),
    ("E", 17, 3, 394), ("F", 2, 9, 2308), ("G", 4, 6, 1668), ("H", 5, 6, 1334),
    ("I", 1, 24, 1790), ("J", 2, 24, 907), ("K", 3, 15, 609), ("L", 4, 36, 458),
    ("M", 8, 15, 236), ("Z", 34, 2, 126),
)

ESP_HEADER = """\
ESP-like throughput workload (reconstruction, not the original benchmark files):
14 job types, 230 jobs, all submitted at t=0, on 17 nodes x 2 processors.
Job-type sizes follow the benchmark's fractions of the machine; run times are
scaled so the mix totals 443340 CPU-seconds. Submission order is a fixed shuffle.
Generated by batchsched.workload.esp_like_workload()."""


def esp_like_workload(seed: int = 230) -> WorkloadSpec:
    nodes = [Node("n%02d" % i, 2) for i in range(1, 18)]
    jobs = []
    for _name, procs, count, secs in ESP_TYPES:
        if procs % 2 == 0:
            nb, w = procs // 2, 2
        else:
            nb, w = procs, 1
        jobs += [WorkloadJob(0, nb, w, secs, secs) for _ in range(count)]
    random.Random(seed).shuffle(jobs)
    return WorkloadSpec(jobs=jobs, nodes=nodes)


def shipped_esp_workload() -> WorkloadSpec:
    text = resources.files("batchsched.data").joinpath("esp_like.workload").read_text("utf-8")
    return parse_workload(text)
