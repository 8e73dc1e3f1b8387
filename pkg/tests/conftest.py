import numpy as np
import pytest

from saliex.nn import Tape, backward

_ACCEPTANCE = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(num, title): numbered acceptance criterion")
    config.addinivalue_line("markers", "slow: long-running (minutes)")


def pytest_runtest_logreport(report):
    marker = getattr(report, "acceptance", None)
    if marker is None or report.when == "teardown":
        return
    entry = _ACCEPTANCE.setdefault(report.nodeid, {"marker": marker, "outcome": "passed", "seconds": 0.0, "out": ""})
    entry["seconds"] += report.duration
    if report.outcome != "passed":
        entry["outcome"] = report.outcome
    if report.when == "call":
        entry["out"] = report.capstdout


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = (m.args[0], m.args[1], item.name)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for e in sorted(_ACCEPTANCE.values(), key=lambda e: e["marker"][0]):
        num, title, name = e["marker"]
        status = "PASS" if e["outcome"] == "passed" else "FAIL"
        terminalreporter.write_line(f"[{status}] criterion {num}: {title} ({name}, {e['seconds']:.1f}s)")
        for line in e["out"].splitlines():
            terminalreporter.write_line(f"    {line}")


def numeric_grad(f, t, h=1e-6):
    """Central differences of scalar ``f()`` w.r.t. every entry of ``t.data``."""
    out = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    g = out.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(f().data)
        flat[i] = old - h
        down = float(f().data)
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return out


def analytic_grads(f, tensors):
    for t in tensors:
        t.grad = None
    with Tape():
        loss = f()
    backward(loss)
    return [t.grad.copy() for t in tensors]


def rel_error(a, b):
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / den)


def max_grad_error(f, tensors, h=1e-6):
    grads = analytic_grads(f, tensors)
    return max(rel_error(g, numeric_grad(f, t, h)) for g, t in zip(grads, tensors))
