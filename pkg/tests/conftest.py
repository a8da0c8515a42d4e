import numpy as np
import pytest

from lipcert import data_path
from lipcert.network import load_network

# float comparisons between independently computed quantities that can be
# exactly equal in real arithmetic (tight certificates, sampled maxima)
REL_ROUNDING = 1e-9


def leq(a, b, rtol=REL_ROUNDING, atol=1e-12):
    return a <= b + rtol * abs(b) + atol


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def bundled():
    return lambda name: load_network(data_path(name))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
