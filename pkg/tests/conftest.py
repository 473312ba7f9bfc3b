import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from prosumer_gne.harness import ExperimentConfig, generate_scenario  # noqa: E402
from prosumer_gne.model import TimeGrid  # noqa: E402


@pytest.fixture(scope="session")
def small_scenario():
    """Four agents over six steps, fast enough for iterative tests."""
    cfg = ExperimentConfig(n_agents=4, grid=TimeGrid(T=6, dt=4.0))
    return generate_scenario(cfg, 11)


@pytest.fixture(scope="session")
def standard_scenario():
    """Ten agents over a day at hourly resolution."""
    return generate_scenario(ExperimentConfig(), 3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
CRITERIA = {}


@pytest.fixture(scope="session")
def criterion():
    def record(number, passed, detail):
        CRITERIA[number] = (bool(passed), detail)
        return bool(passed)
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
