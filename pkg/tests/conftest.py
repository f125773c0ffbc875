from pathlib import Path

import numpy as np
import pytest

from lensxray.config import ExperimentConfig
from lensxray.metric_model import Bump, BumpTensorField, Domain, MetricSpec

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

# pass/fail lines collected by the acceptance tests and echoed at the end
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def desk_cfg():
    return ExperimentConfig.load(CONFIGS / "desk.toml")


@pytest.fixture(scope="session")
def bump_spec():
    return MetricSpec(Domain(1.0, 0.9, 2), (Bump((0.1, 0.2), 0.3, -0.2, True),
                                            Bump((-0.2, 0.1), 0.35, [[0.2, 0.05], [0.05, -0.1]], False)))


@pytest.fixture(scope="session")
def focusing_spec():
    return MetricSpec(Domain(1.0, 0.9, 2), (Bump((0.0, 0.0), 0.25, 3.0, True),))


@pytest.fixture(scope="session")
def test_field():
    return BumpTensorField(2, (Bump((0.2, 0.1), 0.3, [[1.0, 0.3], [0.3, -0.5]], False),
                               Bump((-0.3, -0.2), 0.25, 0.7, True)), 0.85, 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
