"""Prints one PASS/FAIL line per acceptance criterion at the end of the run."""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_results: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion this test checks")


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            item.user_properties.append(("criterion", (mark.args[0], mark.args[1])))


def pytest_runtest_logreport(report):
    crit = dict(report.user_properties).get("criterion")
    if crit is None:
        return
    number, title = crit
    _, failures = _results.setdefault(number, (title, []))
    if report.failed or (report.when == "call" and report.skipped):
        failures.append(report.nodeid)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        title, failures = _results[number]
        status = "FAIL" if failures else "PASS"
        terminalreporter.write_line(f"[{status}] criterion {number}: {title}")
