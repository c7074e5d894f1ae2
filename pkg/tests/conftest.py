from importlib import resources

import fakeredis
import numpy as np
import pytest

from adabatch.cache import setup_cache
from adabatch.sparse_core import Dataset, Example, PLaw, SparseVector, gen_synthetic, parse_libsvm


@pytest.fixture(autouse=True)
def fake_cache():
    """Give every test its own in-memory Redis."""
    connection = fakeredis.FakeRedis(server=fakeredis.FakeServer())
    setup_cache(redis_connection=connection)
    return connection


@pytest.fixture
def tiny_data():
    """The bundled 200-example libsvm sample."""
    with (resources.files('adabatch') / 'data' / 'tiny.libsvm').open() as stream:
        return parse_libsvm(stream)


@pytest.fixture
def handmade():
    """Four examples over three coordinates with hand-checkable frequencies."""
    rows = [
        ([(0, 1.0), (2, 2.0)], 1.0),
        ([(1, -1.0), (2, 1.0)], -1.0),
        ([(2, 0.5)], 1.0),
        ([(0, 3.0)], -1.0),
    ]
    return Dataset([Example(SparseVector.from_pairs(pairs, 3), label) for pairs, label in rows], 3)


@pytest.fixture
def logistic_data():
    data, _ = gen_synthetic(20, 2000, PLaw(low=0.02, high=0.5), noise=0.05, seed=3)
    return data


@pytest.fixture
def squared_data():
    data, _ = gen_synthetic(10, 3000, PLaw(low=0.05, high=0.4), noise=0.1, seed=11, task='squared')
    return data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def pair():
    """Three examples over two coordinates, both active in two rows out of three."""
    rows = [
        ([(0, 1.0)], 1.0),
        ([(1, 2.0)], -1.0),
        ([(0, 1.0), (1, -1.0)], 0.5),
    ]
    return Dataset([Example(SparseVector.from_pairs(pairs, 2), label) for pairs, label in rows], 2)
