"""Per-criterion PASS/FAIL summary for tests marked ``@pytest.mark.criterion(n, text)``."""

import pytest

_results = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, text = mark.args
    ok = rep.passed if rep.when == "call" else not rep.failed
    if rep.when == "call" or rep.failed or rep.skipped:
        prev = _results.get(number, (text, True))
        _results[number] = (text, prev[1] and ok and not rep.skipped)


def pytest_terminal_summary(terminalreporter):
    if not _results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_results):
        text, ok = _results[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {text}")
