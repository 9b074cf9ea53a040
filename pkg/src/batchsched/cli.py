"""Command-line interface.

Job commands (``submit``, ``del``, ``stat``) are short-lived clients of a
running engine (``serve``): they read and write the engine's store file and
nudge it through its notification socket.  ``bench-run`` and
``bench-burst`` run self-contained simulations.

Exit codes: 0 success, 1 rejection or unknown job, 2 engine unreachable.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
from typing import Optional, Sequence

from .admission import Rejected, SubmissionRequest
from .bench import bench_burst, bench_run, report_render
from .config import KernelConfig, load_config
from .kernel import (
    EngineUnreachable,
    Kernel,
    NotificationKind,
    NotificationServer,
    engine_reachable,
    request_cancellation,
    send_notification,
    socket_path,
    submit_job,
)
from .model import JobState, JobType, Node, Policy
from .store import JobFilter, Store, UnknownJobError
from .workload import ESP_HEADER, esp_like_workload, format_workload, load_workload, \
    shipped_esp_workload

EXIT_OK, EXIT_REJECTED, EXIT_UNREACHABLE = 0, 1, 2

STAT_COLUMNS = ("id", "user", "queue", "state", "procs", "submitted", "started", "stopped",
                "message")


def _store_path(state_dir: str) -> str:
    return os.path.join(state_dir, "store.tsv")


def _config(args) -> KernelConfig:
    path = args.config or os.environ.get("BATCHSCHED_CONFIG")
    return load_config(path) if path else load_config()


def _open_store(state_dir: str) -> Store:
    path = _store_path(state_dir)
    if not os.path.exists(path):
        raise EngineUnreachable("no engine state in %s" % state_dir)
    return Store.open(path, recover=False)


def _err(msg: str):
    print(msg, file=sys.stderr)


def parse_time(text: str, now: int) -> int:
    """Absolute seconds, or ``+N`` relative to now."""
    text = text.strip()
    if text.startswith("+"):
        return now + int(text[1:])
    return int(text)


def cmd_submit(args) -> int:
    config = _config(args)
    try:
        if not engine_reachable(args.state):
            raise EngineUnreachable("engine not running for %s" % args.state)
        store = _open_store(args.state)
        now = store.clock()
        request = SubmissionRequest(
            user=args.user or os.environ.get("USER", "unknown"),
            command=" ".join(args.command),
            queue_name=args.queue, nb_nodes=args.nodes, weight=args.weight,
            max_time=args.walltime, properties=args.properties,
            job_type=JobType.INTERACTIVE if args.interactive else None,
            info_type=args.contact,
            launching_directory=os.path.abspath(args.directory or os.getcwd()),
            best_effort=True if args.best_effort else None,
            reservation_start=parse_time(args.reservation, now) if args.reservation else None,
        )
        try:
            job_id = submit_job(store, config, request, now)
        except Rejected as exc:
            _err("rejected: %s" % exc.message)
            return EXIT_REJECTED
        send_notification(args.state, "scheduling")
    except EngineUnreachable as exc:
        _err(str(exc))
        return EXIT_UNREACHABLE
    print(job_id)
    return EXIT_OK


def cmd_del(args) -> int:
    try:
        store = _open_store(args.state)
        try:
            pending = request_cancellation(store, args.job_id)
        except UnknownJobError:
            _err("unknown job %d" % args.job_id)
            return EXIT_REJECTED
        if not pending:
            _err("warning: job %d is already %s" % (args.job_id,
                                                    store.get_job(args.job_id).state))
            return EXIT_OK
        send_notification(args.state, "chstate")
    except EngineUnreachable as exc:
        _err(str(exc))
        return EXIT_UNREACHABLE
    return EXIT_OK


def _fmt(v) -> str:
    return "" if v is None else str(v)


def stat_table(jobs) -> str:
    rows = [STAT_COLUMNS]
    for j in jobs:
        rows.append((str(j.job_id), j.user, j.queue_name, str(j.state),
                     "%dx%d" % (j.nb_nodes, j.weight), _fmt(j.submission_time),
                     _fmt(j.start_time), _fmt(j.stop_time), j.message))
    widths = [max(len(r[i]) for r in rows) for i in range(len(STAT_COLUMNS) - 1)]
    lines = []
    for r in rows:
        head = "  ".join(c.ljust(w) for c, w in zip(r, widths))
        lines.append((head + "  " + r[-1]).rstrip())
    return "\n".join(lines) + "\n"


def cmd_stat(args) -> int:
    try:
        store = _open_store(args.state)
    except EngineUnreachable as exc:
        _err(str(exc))
        return EXIT_UNREACHABLE
    flt = JobFilter(
        state=JobState(args.job_state) if args.job_state else None,
        queue_name=args.queue, user=args.user,
        best_effort=True if args.best_effort else None,
    )
    sys.stdout.write(stat_table(store.query_jobs(flt)))
    return EXIT_OK


def cmd_serve(args) -> int:
    config = _config(args)
    config.mode = "real"
    os.makedirs(args.state, exist_ok=True)
    nodes = config.nodes or [Node("localhost", os.cpu_count() or 1)]
    store = Store.open(_store_path(args.state), nodes=nodes)
    kernel = Kernel(store, config)
    server = NotificationServer(socket_path(args.state), kernel)
    server.start()

    def stop(signum, frame):
        kernel.notify(NotificationKind.SHUTDOWN)

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    logging.getLogger(__name__).info("engine serving %s", args.state)
    try:
        kernel.serve_forever()
    finally:
        server.shutdown()
        server.server_close()
        if os.path.exists(socket_path(args.state)):
            os.unlink(socket_path(args.state))
    return EXIT_OK


def _load_bench_workload(path: Optional[str]):
    return shipped_esp_workload() if path in (None, "esp") else load_workload(path)


def cmd_bench_run(args) -> int:
    config = _config(args)
    report = bench_run(_load_bench_workload(args.workload), Policy(args.policy.upper()), config)
    sys.stdout.write(report_render(report, args.plot))
    return EXIT_OK


def cmd_bench_burst(args) -> int:
    config = _config(args)
    report = bench_burst(args.count, args.nodes_per_job, config, nodes=args.cluster_nodes,
                         capacity=args.capacity, duration=args.duration)
    sys.stdout.write(report_render(report, args.plot))
    return EXIT_OK


def cmd_esp_workload(args) -> int:
    text = format_workload(esp_like_workload(args.seed), ESP_HEADER)
    if args.output:
        with open(args.output, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="batchsched", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="engine configuration file (INI)")
    p.add_argument("--state", default=os.environ.get("BATCHSCHED_STATE", "batchsched-state"),
                   help="engine state directory (store file and notification socket)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("submit", help="submit a job")
    s.add_argument("-n", "--nodes", type=int, help="number of nodes")
    s.add_argument("-w", "--weight", type=int, help="processors per node")
    s.add_argument("-t", "--walltime", type=int, help="maximal execution time (s)")
    s.add_argument("-q", "--queue")
    s.add_argument("-p", "--properties", help="node constraint, e.g. \"mem >= 512 AND switch = 's1'\"")
    s.add_argument("-r", "--reservation", help="reserve a start time (absolute s or +N)")
    s.add_argument("-b", "--best-effort", action="store_true")
    s.add_argument("-I", "--interactive", action="store_true")
    s.add_argument("--contact", help="host:port to contact for interactive jobs")
    s.add_argument("-d", "--directory", help="launching directory")
    s.add_argument("--user")
    s.add_argument("command", nargs=argparse.REMAINDER)
    s.set_defaults(func=cmd_submit)

    d = sub.add_parser("del", help="cancel a job")
    d.add_argument("job_id", type=int)
    d.set_defaults(func=cmd_del)

    st = sub.add_parser("stat", help="list jobs")
    st.add_argument("--user")
    st.add_argument("-q", "--queue")
    st.add_argument("-s", "--job-state", choices=[s.value for s in JobState])
    st.add_argument("-b", "--best-effort", action="store_true")
    st.set_defaults(func=cmd_stat)

    sv = sub.add_parser("serve", help="run the engine with local-process execution")
    sv.set_defaults(func=cmd_serve)

    br = sub.add_parser("bench-run", help="simulate a workload and report efficiency")
    br.add_argument("workload", nargs="?", default="esp",
                    help="workload file, or 'esp' for the shipped ESP-like mix")
    br.add_argument("--policy", default="FIFO", choices=["FIFO", "SAF", "fifo", "saf"])
    br.add_argument("--plot", help="write the utilization series here")
    br.set_defaults(func=cmd_bench_run)

    bb = sub.add_parser("bench-burst", help="simulate simultaneous small submissions")
    bb.add_argument("count", type=int)
    bb.add_argument("--nodes-per-job", type=int, default=1)
    bb.add_argument("--cluster-nodes", type=int, default=17)
    bb.add_argument("--capacity", type=int, default=2)
    bb.add_argument("--duration", type=int, default=1)
    bb.add_argument("--plot")
    bb.set_defaults(func=cmd_bench_burst)

    ew = sub.add_parser("esp-workload", help="write the ESP-like sample workload")
    ew.add_argument("-o", "--output")
    ew.add_argument("--seed", type=int, default=230)
    ew.set_defaults(func=cmd_esp_workload)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.verb == "submit" and not args.command:
        _err("submit: a command is required")
        return EXIT_REJECTED
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
