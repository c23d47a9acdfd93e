import numpy as np
import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def criterion():
    """Record a one-line verdict for the acceptance summary printed at the end of the run."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> bool:
        line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}"
        ACCEPTANCE_LINES.append(line + (f" -- {detail}" if detail else ""))
        print(ACCEPTANCE_LINES[-1])
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
