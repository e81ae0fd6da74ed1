import numpy as np
import pytest

from soar import autodiff as ad


@pytest.fixture(autouse=True)
def finite_checks():
    ad.set_check_finite(True)
    yield
    ad.set_check_finite(False)


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
