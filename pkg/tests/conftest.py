import numpy as np
import pytest

from fracheat.stable_kernel import StableParams, default_kernel_table


@pytest.fixture(scope="session")
def table2():
    return default_kernel_table(StableParams(2.0))


@pytest.fixture(scope="session")
def table15():
    return default_kernel_table(StableParams(1.5))


@pytest.fixture(scope="session")
def table154():
    return default_kernel_table(StableParams(1.5, 0.4))


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240817)
