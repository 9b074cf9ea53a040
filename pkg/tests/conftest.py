import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from batchsched.admission import SubmissionRequest  # noqa: E402
from batchsched.config import KernelConfig  # noqa: E402
from batchsched.executor import VirtualClock  # noqa: E402
from batchsched.kernel import Kernel  # noqa: E402
from batchsched.model import Node  # noqa: E402
from batchsched.store import Store  # noqa: E402

#: criterion number -> (all passed so far, title, detail lines)
_acceptance: dict[str, list] = {}


def make_kernel(nodes=None, **config):
    nodes = nodes if nodes is not None else [Node("n1", 1)]
    clock = VirtualClock()
    store = Store(nodes, clock=clock)
    return Kernel(store, KernelConfig(**config), clock)


def request(command="job", user="alice", **kw):
    return SubmissionRequest(user=user, command=command, **kw)


@pytest.fixture
def detail(request):
    """Attach a measured value to the acceptance summary line."""
    def add(text):
        request.node.user_properties.append(("detail", text))
    return add


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        number, title = marker.args
        entry = _acceptance.setdefault(str(number), [True, title, []])
        entry[0] = entry[0] and rep.passed
        entry[2] += [v for k, v in item.user_properties if k == "detail"]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance, key=int):
        ok, title, details = _acceptance[number]
        line = "criterion %2s  %s  %s" % (number, "PASS" if ok else "FAIL", title)
        if details:
            line += "  [" + "; ".join(details) + "]"
        terminalreporter.write_line(line)
