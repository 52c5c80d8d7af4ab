import numpy as np
import pytest

from pinlf.data import HdiMatrix
from pinlf.factors import FactorPair
from pinlf.oracle import DenseInstance


def random_instance(seed, max_dim=8, max_f=3, min_density=0.3):
    """Small random HDI matrix, its dense twin, and strictly positive factors."""
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, max_dim + 1))
    N = int(rng.integers(1, max_dim + 1))
    f = int(rng.integers(1, max_f + 1))
    density = rng.uniform(min_density, 1.0)
    mask = rng.random((M, N)) < density
    if not mask.any():
        mask[rng.integers(M), rng.integers(N)] = True
    R = np.where(mask, rng.uniform(0.0, 5.0, (M, N)), np.nan)
    rows, cols = np.nonzero(mask)
    data = HdiMatrix.from_arrays(rows, cols, R[rows, cols], (M, N))
    pair = FactorPair(rng.uniform(0.01, 1.0, (M, f)), rng.uniform(0.01, 1.0, (N, f)))
    return data, DenseInstance(R, mask), pair


@pytest.fixture
def instance_factory():
    return random_instance


@pytest.fixture
def one_by_one():
    data = HdiMatrix.from_arrays([0], [0], [2.0])
    return data, FactorPair(np.ones((1, 1)), np.ones((1, 1)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
