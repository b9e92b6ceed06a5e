import numpy as np
import pytest

from bilevel.core import EvalCounter


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def counter():
    return EvalCounter()


def pytest_terminal_summary(terminalreporter):
    from tests import test_acceptance

    if test_acceptance.VERDICTS:
        terminalreporter.section("acceptance criteria")
        for key in sorted(test_acceptance.VERDICTS):
            terminalreporter.write_line(test_acceptance.VERDICTS[key])
