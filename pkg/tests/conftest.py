import numpy as np
import pytest

from fetrack.numerics import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / scale)


_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Records one acceptance line; the lines are printed in the terminal summary."""
    def record(name, ok, detail):
        _ACCEPTANCE.append((name, ok, detail))
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
