import numpy as np
import pytest

from fedmosaic.data import DIRICHLET, PartitionSpec, ScenarioSpec, make_scenario

ACCEPTANCE_LINES = []


@pytest.fixture
def record_criterion():
    """Log one PASS/FAIL line per acceptance criterion, then assert it."""
    def _record(number, passed, detail):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_scenario():
    spec = ScenarioSpec(num_classes=4, dim=6, per_class=60, separation=3.0,
                        public_fraction=0.4, test_per_client=40,
                        partition=PartitionSpec(DIRICHLET, 4, seed=3, alpha=1.0))
    return make_scenario(spec)
