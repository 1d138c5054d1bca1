import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from invlab.schedule import build_schedule, make_grid

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion reported in the summary")
    config.addinivalue_line("markers", "slow: takes more than a few seconds")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when == "teardown":
        return
    text, prev_outcome, prev_secs = _CRITERIA.get((mark.args[0], item.name), (mark.args[1], "passed", 0.0))
    # setup time counts too: the expensive runs live in module fixtures
    result = rep.outcome if prev_outcome == "passed" else prev_outcome
    _CRITERIA[(mark.args[0], item.name)] = (text, result, prev_secs + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted({n for n, _ in _CRITERIA}):
        parts = [(name, *v) for (m, name), v in sorted(_CRITERIA.items()) if m == n]
        ok = all(outcome == "passed" for _, _, outcome, _ in parts)
        secs = sum(d for *_, d in parts)
        title = "; ".join(dict.fromkeys(text for _, text, _, _ in parts))
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}  [{secs:.1f}s]"
        failed = [name for name, _, outcome, _ in parts if outcome != "passed"]
        if failed:
            line += "  failing: " + ", ".join(failed)
        terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def grid(sched):
    return make_grid(sched, 20, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
