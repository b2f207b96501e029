import numpy as np
import pytest

from coat import tensor as T


@pytest.fixture
def f64():
    """Run the test body in 64-bit mode with a fresh tape."""
    T.current_tape().clear()
    with T.precision(64):
        yield
    T.current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_configure(config):
    config._criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    report = outcome.get_result()
    n, title = mark.args
    results = item.config._criteria
    if report.when == "call" or report.failed:
        prev = results.get(n, (title, "PASS"))[1]
        results[n] = (title, "FAIL" if report.failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = getattr(config, "_criteria", {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        title, verdict = results[n]
        terminalreporter.write_line(f"criterion {n:>2} {title}: {verdict}")
