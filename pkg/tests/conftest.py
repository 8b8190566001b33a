import numpy as np
import pytest

from densefpn.params import make_rng


@pytest.fixture
def rng():
    return make_rng(1234)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running training checks")


def leaf(rng, shape, dtype=np.float64):
    from densefpn import Tensor

    return Tensor(rng.standard_normal(shape).astype(dtype), requires_grad=True)
