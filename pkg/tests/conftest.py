import numpy as np
import pytest

from margokit.data import gen_collection
from margokit.kernels import Bag, KernelSpec


@pytest.fixture
def unit_spec() -> KernelSpec:
    return KernelSpec(sigma_x=1.0, sigma_xp=1.0, sigma_p=1.0)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def origin_bag() -> Bag:
    return Bag("a", [[0.0]])


@pytest.fixture
def pair_bag() -> Bag:
    return Bag("b", [[0.0], [1.0]])


@pytest.fixture
def ellipse_tasks():
    return gen_collection(4, 20, seed=11)


def random_bags(rng: np.random.Generator, count: int, d: int = 2, low: int = 2, high: int = 6):
    return [
        Bag(f"bag-{i}", rng.uniform(0.0, 2.0, size=(int(rng.integers(low, high + 1)), d)))
        for i in range(count)
    ]
