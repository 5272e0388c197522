import numpy as np
import pytest

from mandril.mdp import TabularMDP, compile_gridworld
from mandril.selfcheck import micro_grid, micro_instances  # noqa: F401  (re-exported for tests)


@pytest.fixture
def grid3():
    return micro_grid()


@pytest.fixture
def mdp3(grid3):
    mdp, _ = compile_gridworld(grid3, 4)
    return mdp


@pytest.fixture
def single_state_mdp():
    return TabularMDP(np.zeros((1, 1), dtype=int), np.ones(1), 5)


def two_cell_mdp(horizon=2):
    """Two states, two actions: action 0 stays, action 1 switches."""
    nxt = np.array([[0, 1], [1, 0]])
    return TabularMDP(nxt, np.array([1.0, 0.0]), horizon)


# one line per acceptance criterion, printed after the run whatever the capture mode
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def report(number: int, title: str, passed: bool, detail: str):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {title}: {detail}")
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
