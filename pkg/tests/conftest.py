import pytest

from basemoe.core import STREAM_PARAMS, init_experts, seeded_rng
from basemoe.trainer import SyntheticTask, train_toy


@pytest.fixture(scope="session")
def trained_seed11():
    """K=4, E=4, D=8 clustered task trained for 500 steps with seed 11."""
    task = SyntheticTask.make(4, 8, 11)
    experts = init_experts(seeded_rng(11, STREAM_PARAMS), 4, 8, 1)
    return task, train_toy(task, experts, 500, 0.3, seed=11)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
