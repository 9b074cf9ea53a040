"""Benchmark harness: replay a workload on the simulated cluster and
compute efficiency and response-time metrics."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from itertools import groupby
from typing import Optional

from .admission import Rejected, SubmissionRequest
from .config import KernelConfig
from .executor import ScriptedProber, VirtualClock
from .kernel import Kernel
from .model import Job, JobState, Node, Policy
from .store import Store
from .workload import WorkloadJob, WorkloadSpec


def efficiency(work: float, processors: int, elapsed: float) -> Optional[float]:
    """Fraction of the no-idle lower bound achieved: ``W / (P * T)``."""
    if processors <= 0 or elapsed <= 0:
        return None
    return work / (processors * elapsed)


def lower_bound(work: float, processors: int) -> float:
    """Elapsed time if the work were spread over every processor with no idling."""
    return work / processors


def response_time(job: Job) -> int:
    return job.stop_time - job.submission_time


def utilization_series(jobs) -> list[tuple[int, int]]:
    """Busy processors over time, counting completed jobs only.

    Returns ``(t, busy)`` change points; ``busy`` holds until the next point.
    """
    deltas = Counter()
    for j in jobs:
        if j.state == JobState.TERMINATED and j.start_time is not None:
            deltas[j.start_time] += j.procs
            deltas[j.stop_time] -= j.procs
    series, busy = [], 0
    for t in sorted(deltas):
        busy += deltas[t]
        if series and series[-1][1] == busy:
            continue
        series.append((t, busy))
    return series


@dataclass
class MetricsReport:
    work: int = 0
    processors: int = 0
    elapsed: int = 0
    response_times: dict[int, int] = field(default_factory=dict)
    states: dict[str, int] = field(default_factory=dict)
    rejected: int = 0
    series: list[tuple[int, int]] = field(default_factory=list)

    @property
    def efficiency(self) -> Optional[float]:
        return efficiency(self.work, self.processors, self.elapsed)

    @property
    def lower_bound(self) -> Optional[float]:
        return lower_bound(self.work, self.processors) if self.processors else None

    @property
    def mean_response(self) -> Optional[float]:
        if not self.response_times:
            return None
        return sum(self.response_times.values()) / len(self.response_times)


def collect_metrics(jobs: list[Job], processors: int, rejected: int = 0) -> MetricsReport:
    done = [j for j in jobs if j.stop_time is not None]
    elapsed = 0
    if done:
        elapsed = max(j.stop_time for j in done) - min(j.submission_time for j in jobs)
    work = sum(j.procs * (j.stop_time - j.start_time) for j in jobs
               if j.state == JobState.TERMINATED)
    return MetricsReport(
        work=work,
        processors=processors,
        elapsed=elapsed,
        response_times={j.job_id: response_time(j) for j in done},
        states=dict(sorted(Counter(str(j.state) for j in jobs).items())),
        rejected=rejected,
        series=utilization_series(jobs),
    )


def _request(wj: WorkloadJob, seq: int) -> SubmissionRequest:
    return SubmissionRequest(
        user="bench", command="sleep %d" % wj.actual_duration, queue_name=wj.queue_name,
        nb_nodes=wj.nb_nodes, weight=wj.weight, max_time=wj.max_time,
        properties=wj.properties, job_type=wj.job_type, best_effort=wj.best_effort or None,
        reservation_start=wj.reservation_start, actual_duration=wj.actual_duration)


def simulate(workload: WorkloadSpec, config: Optional[KernelConfig] = None,
             max_steps: int = 2_000_000) -> tuple[Kernel, int]:
    """Replay ``workload`` to quiescence; returns the kernel and the
    number of rejected submissions."""
    config = config or KernelConfig()
    workload.validate(config.queues)
    clock = VirtualClock()
    store = Store(workload.nodes, clock=clock)
    prober = ScriptedProber(workload.outages, clock=clock)
    kernel = Kernel(store, config, clock, prober=prober)
    rejected = 0
    seq = 0
    for t, group in groupby(workload.jobs, key=lambda j: j.submit_time):
        kernel.run_until_quiescent(max_steps=max_steps, until=t)
        clock.advance_to(t)
        for wj in group:
            seq += 1
            try:
                kernel.submit(_request(wj, seq))
            except Rejected:
                rejected += 1
    kernel.run_until_quiescent(max_steps=max_steps)
    return kernel, rejected


def bench_run(workload: WorkloadSpec, policy: Optional[Policy] = None,
              config: Optional[KernelConfig] = None) -> MetricsReport:
    config = config or KernelConfig()
    if policy is not None:
        config = config.with_policy(policy)
    kernel, rejected = simulate(workload, config)
    return collect_metrics(kernel.store.query_jobs(), workload.processors, rejected)


def burst_workload(n: int, nodes_per_job: int = 1, nodes: int = 17, capacity: int = 2,
                   duration: int = 1) -> WorkloadSpec:
    cluster = [Node("n%03d" % i, capacity) for i in range(1, nodes + 1)]
    jobs = [WorkloadJob(0, nodes_per_job, 1, duration, duration) for _ in range(n)]
    return WorkloadSpec(jobs=jobs, nodes=cluster)


def bench_burst(n: int, nodes_per_job: int = 1, config: Optional[KernelConfig] = None,
                nodes: int = 17, capacity: int = 2, duration: int = 1) -> MetricsReport:
    """``n`` identical small jobs submitted together at t=0."""
    return bench_run(burst_workload(n, nodes_per_job, nodes, capacity, duration), config=config)


def report_render(report: MetricsReport, plot_path: Optional[str] = None) -> str:
    eff = report.efficiency
    mean = report.mean_response
    rows = [
        ("Available Processors", str(report.processors)),
        ("Jobmix work (CPU-sec)", str(report.work)),
        ("Elapsed Time", str(report.elapsed)),
        ("Efficiency", "n/a" if eff is None else "%.4f" % eff),
        ("Lower bound (s)", "n/a" if not report.processors else "%.1f" % report.lower_bound),
        ("Jobs completed", str(len(report.response_times))),
        ("Mean response time (s)", "n/a" if mean is None else "%.2f" % mean),
    ]
    if report.states:
        rows.append(("Final states", ", ".join("%s=%d" % kv for kv in report.states.items())))
    if report.rejected:
        rows.append(("Rejected submissions", str(report.rejected)))
    width = max(len(r[0]) for r in rows)
    text = "\n".join("%-*s  %s" % (width, k, v) for k, v in rows) + "\n"
    if plot_path is not None:
        write_series(report.series, plot_path)
    return text


def write_series(series, path: str):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("time\tbusy_procs\n")
        for t, busy in series:
            fh.write("%d\t%d\n" % (t, busy))
