import numpy as np
import pytest

from eqrl.ckks import keygen, table1_params, test_small_params


@pytest.fixture(scope="session")
def small():
    return test_small_params()


@pytest.fixture(scope="session")
def small_keys(small):
    return keygen(small, np.random.default_rng(1234))


@pytest.fixture(scope="session")
def big():
    return table1_params()


@pytest.fixture(scope="session")
def big_keys(big):
    return keygen(big, np.random.default_rng(4321))


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
