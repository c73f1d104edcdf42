"""Shared pytest wiring: a readable pass/fail line per acceptance criterion."""

import pytest

_ACCEPTANCE_RESULTS = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    if report.when != "call":
        return
    if "test_acceptance" in item.nodeid:
        marker = item.get_closest_marker("criterion")
        label = marker.args[0] if marker else item.name
        _ACCEPTANCE_RESULTS[label] = report.outcome


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for label, outcome in _ACCEPTANCE_RESULTS.items():
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"[{word}] {label}")


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "criterion(name): acceptance criterion label for the summary"
    )
