import numpy as np
import pytest
import torch

from prime_impute.numerics import float64_mode
from toys import ACCEPTANCE_LINES

torch.set_num_threads(1)


@pytest.fixture
def f64():
    with float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
