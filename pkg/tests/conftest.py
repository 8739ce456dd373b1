import pytest

from inflasim.background import CosmologyParams
from inflasim.lattice_modes import LatticeSpec

# acceptance lines collected here are echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_params():
    return CosmologyParams(H=0.005, epsilon=0.01, c_s=1.0, tau0=-50.0, tau_end=-25.0)


@pytest.fixture
def two_sites():
    return LatticeSpec(10.0, 2, 1)


@pytest.fixture
def four_sites():
    return LatticeSpec(10.0, 4, 1)
