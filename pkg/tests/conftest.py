"""Collects one verdict line per acceptance criterion and prints them at the
end of the session."""

import pytest

VERDICTS = {}


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        VERDICTS[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(VERDICTS[number])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])
