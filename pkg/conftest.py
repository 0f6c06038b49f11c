import numpy as np
import pytest

from autodiff.tensor import float64_mode


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: end-to-end training runs (minutes on a laptop CPU)")


@pytest.fixture
def float64():
    """Run the test body with 64-bit tensors."""
    with float64_mode():
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
