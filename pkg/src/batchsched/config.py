"""Engine configuration file.

INI syntax, read with :mod:`configparser`::

    [engine]
    mode = simulation            ; or "real"
    scheduling_period = 60
    monitoring_period = 300
    health_check = no
    probe_timeout = 5
    probe_command = true         ; real mode, formatted with {node} {timeout}
    victim_policy = youngest     ; or "fewest"

    [admission]
    default_queue = default
    default_walltime = 7200
    max_procs_per_user =         ; empty: total processors of the cluster

    [rule long-to-batch]         ; evaluated in file order, before the stock rules
    when = max_time > 3600       ; conjunction over request fields
    set = queue_name=batch       ; or: reject = some message

    [queue default]
    priority = 0
    policy = FIFO
    active = yes
    best_effort = no

    [node n01]
    capacity = 2
    properties = switch='s1', mem=512

``BATCHSCHED_MODE``, ``BATCHSCHED_SCHEDULING_PERIOD`` and
``BATCHSCHED_MONITORING_PERIOD`` override the ``[engine]`` values.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, fields
from typing import Mapping, Optional

from .admission import AdmissionRule, Reject, SetDefault, SubmissionRequest, default_rules
from .model import Node, Policy, PropertyExpr, Queue, parse_literal


def default_queues() -> list[Queue]:
    return [
        Queue("default", priority=0, policy=Policy.FIFO),
        Queue("besteffort", priority=-100, policy=Policy.FIFO, best_effort=True),
    ]


@dataclass
class KernelConfig:
    scheduling_period: int = 60
    monitoring_period: int = 300
    health_check: bool = False
    probe_timeout: int = 5
    queues: list[Queue] = field(default_factory=default_queues)
    admission_rules: list[AdmissionRule] = field(default_factory=default_rules)
    nodes: list[Node] = field(default_factory=list)
    mode: str = "simulation"
    victim_policy: str = "youngest"
    probe_command: str = "true"
    #: acknowledge accepted reservations on behalf of the client (batch mode)
    auto_ack_reservations: bool = True

    def __post_init__(self):
        if self.scheduling_period < 1 or self.monitoring_period < 1:
            raise ValueError("periods must be >= 1 second")
        if self.mode not in ("simulation", "real"):
            raise ValueError("mode must be 'simulation' or 'real'")
        names = [q.name for q in self.queues]
        if len(set(names)) != len(names):
            raise ValueError("duplicate queue names")

    def queue(self, name: str) -> Optional[Queue]:
        return next((q for q in self.queues if q.name == name), None)

    def with_policy(self, policy: Policy) -> "KernelConfig":
        """Copy in which every queue orders its jobs with ``policy``."""
        from dataclasses import replace
        return replace(self, queues=[replace(q, policy=Policy(policy)) for q in self.queues])


def _request_predicate(expr: PropertyExpr):
    def when(req: SubmissionRequest, ctx) -> bool:
        values = {f.name: getattr(req, f.name) for f in fields(req)}
        return expr.matches({k: v for k, v in values.items() if v is not None})
    return when


def _parse_properties(text: str) -> dict:
    props = {}
    for atom in PropertyExpr.parse(text).atoms:
        if atom.op != "=":
            raise ValueError("node properties use key=value, got %s" % atom)
        props[atom.key] = atom.value
    return props


def load_config(path: Optional[str] = None, text: Optional[str] = None,
                env: Optional[Mapping[str, str]] = None) -> KernelConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=(";",), interpolation=None)
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    if text is not None:
        cp.read_string(text)
    env = os.environ if env is None else env

    eng = cp["engine"] if cp.has_section("engine") else {}
    adm = cp["admission"] if cp.has_section("admission") else {}

    def getint(sec, key, default):
        raw = sec.get(key, "") if sec else ""
        return int(raw) if str(raw).strip() else default

    def getbool(sec, key, default):
        raw = str(sec.get(key, "")).strip().lower() if sec else ""
        if not raw:
            return default
        return raw in ("1", "yes", "true", "on")

    rules = []
    queues, nodes = [], []
    for name in cp.sections():
        sec = cp[name]
        if name.startswith("rule "):
            rule_name = name[5:].strip()
            when = sec.get("when", "").strip()
            pred = _request_predicate(PropertyExpr.parse(when)) if when else None
            if "reject" in sec:
                action = Reject(sec["reject"])
            elif "set" in sec:
                key, _, value = sec["set"].partition("=")
                action = SetDefault(key.strip(), parse_literal(value))
            else:
                raise ValueError("rule %s needs 'set' or 'reject'" % rule_name)
            rules.append(AdmissionRule(rule_name, action, when=pred))
        elif name.startswith("queue "):
            queues.append(Queue(name[6:].strip(), priority=getint(sec, "priority", 0),
                                policy=Policy(sec.get("policy", "FIFO").upper()),
                                active=getbool(sec, "active", True),
                                best_effort=getbool(sec, "best_effort", False)))
        elif name.startswith("node "):
            nodes.append(Node(name[5:].strip(), capacity=getint(sec, "capacity", 1),
                              properties=_parse_properties(sec.get("properties", ""))))

    cap = adm.get("max_procs_per_user", "") if adm else ""
    rules += default_rules(max_time=getint(adm, "default_walltime", 7200),
                           queue=(adm.get("default_queue") if adm else None) or "default",
                           user_proc_cap=int(cap) if str(cap).strip() else None)

    cfg = KernelConfig(
        scheduling_period=int(env.get("BATCHSCHED_SCHEDULING_PERIOD")
                              or getint(eng, "scheduling_period", 60)),
        monitoring_period=int(env.get("BATCHSCHED_MONITORING_PERIOD")
                              or getint(eng, "monitoring_period", 300)),
        health_check=getbool(eng, "health_check", False),
        probe_timeout=getint(eng, "probe_timeout", 5),
        queues=queues or default_queues(),
        admission_rules=rules,
        nodes=nodes,
        mode=env.get("BATCHSCHED_MODE") or (eng.get("mode", "simulation") if eng else "simulation"),
        victim_policy=(eng.get("victim_policy", "youngest") if eng else "youngest"),
        probe_command=(eng.get("probe_command", "true") if eng else "true"),
    )
    return cfg
