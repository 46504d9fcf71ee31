"""Collects acceptance outcomes and prints one line per criterion after the run."""

import pytest

_RESULTS = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when != "call":
        return
    num, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    _RESULTS[num] = (title, report.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_RESULTS):
        title, ok, detail = _RESULTS[num]
        line = f"[{'PASS' if ok else 'FAIL'}] {num:>2}. {title}"
        if detail:
            line += f" | {detail}"
        terminalreporter.write_line(line)
