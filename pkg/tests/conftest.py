import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import acceptance_log  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not acceptance_log.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict, detail in acceptance_log.RESULTS:
        terminalreporter.write_line(f"{verdict:4s} {name}: {detail}")
