import numpy as np
import pytest

from clusterapt.data import ReturnsPanel
from clusterapt.synthetic import business_days

ACCEPTANCE_LINES = []


def make_panel(returns, tickers=None, start="2022-01-03", membership=None):
    returns = np.asarray(returns, dtype=float)
    tickers = tickers or [f"T{i:02d}" for i in range(returns.shape[1])]
    return ReturnsPanel.from_arrays(business_days(start, returns.shape[0]), tickers, returns, membership)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
