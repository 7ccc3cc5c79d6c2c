import numpy as np
import pytest

# one line per acceptance criterion, echoed in the terminal summary
CRITERIA_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report():
    def add(number, name, passed, detail=""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
        CRITERIA_LINES.append(line)
        print(line)

    return add


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA_LINES:
            terminalreporter.write_line(line)
