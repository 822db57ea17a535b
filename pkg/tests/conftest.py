from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from nextact.eventlog import Event, EventLog, LogSchema, Trace

T0 = datetime(2024, 3, 1, 8, 0, tzinfo=timezone.utc)


def make_log(traces: dict[str, list[str]], extras: dict | None = None,
             schema: dict | None = None) -> EventLog:
    """Build a log from ``{case_id: [activity, ...]}`` with one-minute gaps.

    ``extras[case_id]`` optionally holds one attribute dict per event.
    """
    extras = extras or {}
    out = []
    for k, (case, acts) in enumerate(traces.items()):
        per_event = extras.get(case, [{}] * len(acts))
        events = tuple(
            Event(case, a, T0 + timedelta(hours=k, minutes=i), dict(per_event[i]))
            for i, a in enumerate(acts))
        out.append(Trace(case, events))
    return EventLog(tuple(out), LogSchema(schema or {}))


@pytest.fixture
def small_log() -> EventLog:
    return make_log({
        "c1": ["A", "B", "C"],
        "c2": ["A", "C"],
        "c3": ["B", "B", "A", "C"],
    })


@pytest.fixture
def attributed_log() -> EventLog:
    """Three cases carrying a categorical resource and a numeric cost."""
    res = {"c1": ["ann", "bob", "ann"], "c2": ["bob", "cat"], "c3": ["ann", "ann", "bob"]}
    cost = {"c1": [1.0, 2.0, 3.0], "c2": [4.0, 5.0], "c3": [6.0, 7.0, 8.0]}
    acts = {"c1": ["A", "B", "C"], "c2": ["A", "C"], "c3": ["B", "A", "C"]}
    extras = {c: [{"org:resource": r, "cost": x} for r, x in zip(res[c], cost[c])]
              for c in acts}
    return make_log(acts, extras, {"org:resource": "categorical", "cost": "numeric"})


# -- acceptance reporting -----------------------------------------------------
# Tests marked ``@pytest.mark.criterion(n, "title")`` are grouped by ``n``; the
# terminal summary prints one PASS/FAIL/SKIP line per criterion.

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "outcomes": set()})
    entry["outcomes"].add("skipped" if report.skipped else
                          "failed" if report.failed else "passed")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        seen = entry["outcomes"]
        status = "FAIL" if "failed" in seen else "PASS" if "passed" in seen else "SKIP"
        terminalreporter.write_line(f"criterion {n:2d}: {status}  {entry['title']}")
