import numpy as np
import pytest

from ermasym.link_models import GaussianSY, Logistic, NoisySigned, Probit, Signed

SQRT_2_OVER_PI = np.sqrt(2 / np.pi)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def builtin_models():
    return [Signed(), NoisySigned(0.1), NoisySigned(0.25), NoisySigned(0.5), Logistic(), Probit()]


@pytest.fixture(params=builtin_models(), ids=lambda m: m.tag)
def model(request):
    return request.param


@pytest.fixture(params=[0.3, 0.564, 0.8], ids=lambda m: f"m={m}")
def gaussian_model(request):
    return GaussianSY(request.param)
