import os
import sys

import pytest
from hypothesis import strategies as st

sys.path.insert(0, os.path.dirname(__file__))

from buddies.trace import RoundGrid, Trace, _make_trace  # noqa: E402


@st.composite
def traces(draw, max_users=6, max_horizon=60, with_messages=True):
    """Small random traces with disjoint sorted intervals and in-interval messages."""
    horizon = draw(st.integers(1, max_horizon))
    n = draw(st.integers(0, max_users))
    timelines, messages = {}, {}
    for k in range(n):
        cuts = sorted(set(draw(st.lists(st.integers(0, horizon), max_size=6))))
        ivs = [(a, b) for a, b in zip(cuts[0::2], cuts[1::2]) if a < b]
        u = f"u{k}"
        timelines[u] = ivs
        if with_messages and ivs:
            pts = draw(st.lists(st.sampled_from([t for s, e in ivs for t in range(s, e)]), max_size=4))
            messages[u] = sorted(pts)
    return _make_trace(timelines, messages, horizon)


def grid_from_sets(sets, messages=None, users=None):
    """Build a RoundGrid from explicit per-round online sets, sharing objects between equal neighbours."""
    online = []
    prev = None
    for s in sets:
        fs = frozenset(s)
        if prev is not None and fs == prev:
            fs = prev
        online.append(fs)
        prev = fs
    users = tuple(sorted(users if users is not None else set().union(*[set(s) for s in sets]) if sets else ()))
    return RoundGrid(1, len(sets), online, messages or {}, users)


@pytest.fixture
def make_grid():
    return grid_from_sets


# Acceptance criteria report: one line per test carrying the ``criterion`` marker.
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _CRITERIA[n] = (title, rep.outcome, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, outcome, secs = _CRITERIA[n]
        verdict = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}  ({secs:.2f}s)")
