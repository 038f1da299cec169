"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import pytest

_outcomes = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    n, text = mark.args
    if report.when == "call" or (report.when == "setup" and report.failed):
        detail = "; ".join(f"{k}={v}" for k, v in item.user_properties)
        _outcomes[n] = (report.passed, text, detail)


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_outcomes):
        ok, text, detail = _outcomes[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {text}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
