import sys

import numpy as np
import pytest


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full-size profile, deselect with -m 'not slow'")


@pytest.fixture
def rng():
    return np.random.default_rng(20181204)


def random_inputs(rng, n):
    """Rows [r, c, t, d, s] on a 6x6x40 grid with count-like demand/supply."""
    return np.column_stack([
        rng.integers(1, 7, n), rng.integers(1, 7, n), rng.integers(1, 41, n),
        rng.uniform(0, 30, n), rng.uniform(0, 30, n),
    ]).astype(float)


def central_difference(f, x, j, h):
    xp = np.array(x, dtype=float)
    xm = np.array(x, dtype=float)
    xp[j] += h
    xm[j] -= h
    return (f(xp) - f(xm)) / (2 * h)


def rel_err(a, b, floor=1e-6):
    """|a - b| relative to |b|, with an absolute floor for near-zero references."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.abs(b), floor)
