import numpy as np
import pytest

from umono import autograd as ag


@pytest.fixture(autouse=True)
def _strict_numerics():
    # NaN/Inf anywhere in a forward pass fails the test that produced it
    ag.set_check_finite(True)
    yield
    ag.set_check_finite(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with ag.precision(64):
        yield


# ---------------------------------------------------------------------------
# acceptance report: tests marked ``criterion(n, title)`` roll up into one
# PASS/FAIL line per criterion, printed at the end of the session
# ---------------------------------------------------------------------------

_CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion a test belongs to")
    config.stash[_CRITERIA] = {}


def _entry(config, marker):
    n, title = marker.args
    return config.stash[_CRITERIA].setdefault(n, {"title": title, "ok": True, "notes": []})


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None and (rep.when == "call" or rep.failed):
        entry = _entry(item.config, marker)
        entry["ok"] = entry["ok"] and rep.passed


@pytest.fixture
def note(request):
    """Attach a detail string to the current test's criterion line."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        _entry(request.config, marker)["notes"].append(text)
        print(text)
    return add


def pytest_terminal_summary(terminalreporter, config):
    criteria = config.stash.get(_CRITERIA, {})
    if not criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(criteria):
        c = criteria[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if c['ok'] else 'FAIL'}: {c['title']}")
        for text in c["notes"]:
            terminalreporter.write_line(f"    {text}")
