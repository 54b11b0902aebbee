import numpy as np
import pytest

from fedda.models import Batch


def empty_batch(n=1):
    """Featureless batch for quadratic losses, which ignore the samples."""
    return Batch(np.zeros((n, 0)), np.zeros(n), np.arange(n))


@pytest.fixture
def qbatch():
    return empty_batch(4)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.RESULTS:
        terminalreporter.write_line(line)
