import numpy as np
import pytest

from modfuse.autodiff import set_finite_checks

import criteria


@pytest.fixture(autouse=True, scope="session")
def _finite_checks():
    set_finite_checks(True)
    yield
    set_finite_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if criteria.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in criteria.RESULTS:
            terminalreporter.write_line(line)
