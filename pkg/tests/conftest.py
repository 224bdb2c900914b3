import numpy as np
import pytest

# Acceptance verdict lines, echoed in the terminal summary so they land in
# captured logs even without ``-s``.
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
