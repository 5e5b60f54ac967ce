import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from helpers import sim_grid  # noqa: E402


@pytest.fixture
def grid():
    return sim_grid()


_criteria: dict = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or report.failed:
        n = int(name.split("_")[2])
        ok = report.passed and _criteria.get(n, True)
        _criteria[n] = ok


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if _criteria[n] else 'FAIL'}")
