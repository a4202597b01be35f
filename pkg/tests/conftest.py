import numpy as np
import pytest

from app.core.rng import Rng
from app.core.tensor import Tensor
from app.models.config import get_preset


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def micro_config():
    return get_preset("micro")


@pytest.fixture
def gradcheck_config():
    return get_preset("gradcheck_micro")


@pytest.fixture
def random_tensor(rng):
    def make(*shape, std=1.0):
        return Tensor(rng.normal(shape, std=std, dtype=np.float64))
    return make
