"""Collects one pass/fail line per acceptance criterion and prints them at the end."""
import re

import pytest

_LINES = {}
_RAN = set()
N_CRITERIA = 9


@pytest.fixture(scope="session")
def criterion():
    def record(n, passed, detail):
        line = f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}"
        _LINES[n] = line
        print(line)
        return passed
    return record


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_", report.nodeid)
    if m:
        _RAN.add(int(m.group(1)))


def pytest_terminal_summary(terminalreporter):
    if not _RAN:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in _LINES:
            terminalreporter.write_line(_LINES[n])
        elif n in _RAN:
            terminalreporter.write_line(f"criterion {n}: FAIL  (errored before a result was recorded)")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
