import numpy as np
import pytest

from tfk.grid import GridSpec, Tissue, TissueMap
from tfk.phantom import make_phantom


@pytest.fixture
def phantom12():
    return make_phantom(GridSpec.cube(12))


@pytest.fixture
def white_cube():
    def build(n=6):
        return TissueMap.uniform(GridSpec.cube(n), Tissue.WHITE_MATTER)
    return build


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
