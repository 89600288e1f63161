import numpy as np
import pytest

from ccmf.graph import from_edges

import acceptance_log


def pytest_terminal_summary(terminalreporter):
    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_log.LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def one_path():
    """s - v - t plus the st edge, unit capacities."""
    return from_edges(3, [(0, 1), (1, 2)], 0, 2, np.ones(3))


@pytest.fixture
def two_paths():
    """s - v1 - t and s - v2 - t plus the st edge, unit capacities."""
    return from_edges(4, [(0, 1), (1, 3), (0, 2), (2, 3)], 0, 3, np.ones(4))
