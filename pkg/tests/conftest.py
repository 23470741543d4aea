import numpy as np
import pytest

from swjm.design import build_standard_design
from swjm.simulate import NoDropout, SimConfig, WeibullDropout

LOG09 = float(np.log(0.9))


@pytest.fixture
def base_design():
    return build_standard_design(4, 5, 8, 50)


@pytest.fixture
def desk_design():
    return build_standard_design(4, 5, 2, 20)


def make_config(design, dropout=None, effect=5.0, variances=(2.0, 55.0, 40.0), seed=1):
    return SimConfig(design, (30.0,) * design.n_periods, effect, *variances,
                     dropout=dropout or NoDropout(), master_seed=seed)


def informative_dropout():
    return WeibullDropout(-1.5, 0.0, -0.2, LOG09, LOG09)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
