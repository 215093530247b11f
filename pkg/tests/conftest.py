import numpy as np
import pytest

from archreg.data import SyntheticSpec, generate_synthetic
from archreg.model import Model


def central_diff(f, x, h=1e-6):
    """Plain central-difference gradient of scalar f at x, every coordinate."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f(x)
        flat[k] = old - h
        fm = f(x)
        flat[k] = old
        gflat[k] = (fp - fm) / (2 * h)
    return g


@pytest.fixture(scope="session")
def small_data():
    return generate_synthetic(SyntheticSpec(n=96, n_test=32, vocab_size=120), 3)


@pytest.fixture(scope="session")
def small_model():
    return Model(120, dim=6, hidden=10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
