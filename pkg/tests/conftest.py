"""Shared pytest plumbing: the acceptance suite reports one line per criterion."""

import pytest

_RESULTS: dict = {}
_EXPECTED: set = set()


@pytest.fixture
def report():
    """``report(number, title, passed, detail)`` records and prints a criterion verdict."""

    def _report(number: int, title: str, passed: bool, detail: str = "") -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _RESULTS[number] = line
        print(line)
        return passed

    return _report


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark:
            _EXPECTED.add(mark.args[0])


def pytest_terminal_summary(terminalreporter):
    if not _EXPECTED:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_EXPECTED):
        terminalreporter.write_line(_RESULTS.get(n, f"criterion {n:2d} FAIL  no verdict (test errored or was skipped)"))
