"""Collects one verdict line per acceptance criterion and prints them after the run."""
import pytest

VERDICTS = {}


@pytest.fixture
def verdict(request):
    """Call verdict(number, passed, detail) once per criterion test."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        VERDICTS[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[number])
