import io

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from adabatch.exceptions import ConfigError, EmptyDatasetError, ParseError
from adabatch.sparse_core import (Dataset, Example, FeatureStats, PLaw, SparseVector, estimate_feature_probabilities,
                                  gen_synthetic, normalize_rows, parse_libsvm, serialize_libsvm, train_test_split)


def test_sparse_vector_invariants():
    with pytest.raises(ValueError):
        SparseVector(np.array([2, 1]), np.array([1.0, 1.0]), 3)
    with pytest.raises(ValueError):
        SparseVector(np.array([0, 3]), np.array([1.0, 1.0]), 3)
    with pytest.raises(ValueError):
        SparseVector(np.array([0]), np.array([0.0]), 3)


def test_sparse_vector_basics():
    v = SparseVector.from_pairs([(0, 1.0), (1, 0.0), (4, -2.0)], 5)
    assert v.entries == [(0, 1.0), (4, -2.0)]
    assert v.nnz == 2
    assert v.get(4) == -2.0
    assert v.get(1) == 0.0
    assert v.dot(np.arange(5.0)) == -8.0
    assert v.norm() == pytest.approx(np.sqrt(5.0))
    assert v.scaled(0.0) == SparseVector.empty(5)
    assert v.scaled(2.0).entries == [(0, 2.0), (4, -4.0)]
    assert np.array_equal(v.to_dense(), [1.0, 0.0, 0.0, 0.0, -2.0])


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)))
def test_sparse_dot_matches_dense(dense):
    w = np.linspace(-1.0, 1.0, dense.size)
    assert SparseVector.from_dense(dense).dot(w) == pytest.approx(float(dense @ w), abs=1e-9)


def test_parse_libsvm():
    text = "1 1:0.5 3:2  # first\n\n-1 2:1\n+1 1:0 2:4\n"
    data = parse_libsvm(io.StringIO(text))
    assert len(data) == 3
    assert data.dim == 3
    assert np.array_equal(data.labels, [1.0, -1.0, 1.0])
    assert data.examples[0].features.entries == [(0, 0.5), (2, 2.0)]
    # explicit zero values are not stored
    assert data.examples[2].features.entries == [(1, 4.0)]


def test_parse_libsvm_expected_dim():
    data = parse_libsvm(io.StringIO("1 1:1\n"), expected_dim=10)
    assert data.dim == 10


@pytest.mark.parametrize('text, line', [
    ("1 0:1\n", 1),
    ("1 1:1\n1 3:1 2:1\n", 2),
    ("x 1:1\n", 1),
    ("1 1:nan\n", 1),
    ("1 1:\n", 1),
    ("1 a:1\n", 1),
    ("1 ²:1\n", 1),
    ("1 １:1\n", 1),
    ("1 1:1\n\n1 2:1 2:3\n", 3),
])
def test_parse_libsvm_errors(text, line):
    with pytest.raises(ParseError) as exc:
        parse_libsvm(io.StringIO(text))
    assert exc.value.line_number == line


def test_serialize_roundtrip(tiny_data):
    stream = io.StringIO()
    serialize_libsvm(tiny_data, stream)
    again = parse_libsvm(io.StringIO(stream.getvalue()))
    assert again.fingerprint == tiny_data.fingerprint


def test_tiny_data(tiny_data):
    assert len(tiny_data) == 200
    assert set(np.unique(tiny_data.labels)) <= {-1.0, 1.0}


def test_feature_probabilities(handmade):
    stats = estimate_feature_probabilities(handmade)
    assert np.array_equal(stats.p, [0.5, 0.25, 0.75])
    assert stats.pmin == 0.25
    assert stats.pmax == 0.75


def test_feature_probabilities_ignore_absent_coordinates():
    stats = FeatureStats.from_probabilities(np.array([0.0, 0.2, 1.0]))
    assert stats.pmin == 0.2
    assert np.array_equal(stats.active, [False, True, True])
    with pytest.raises(ConfigError):
        FeatureStats.from_probabilities(np.array([1.5]))


def test_feature_probabilities_empty():
    with pytest.raises(EmptyDatasetError):
        estimate_feature_probabilities(Dataset([], 3))


def test_matrix_and_fingerprint(handmade):
    dense = handmade.matrix.toarray()
    assert dense.shape == (4, 3)
    assert dense[0, 2] == 2.0
    flipped = Dataset(handmade.examples[:3] + [Example(handmade.examples[3].features, 1.0)], 3)
    assert flipped.fingerprint != handmade.fingerprint
    assert handmade.subset([0, 1, 2, 3]).fingerprint == handmade.fingerprint


def test_normalize_rows(handmade):
    matrix = normalize_rows(handmade).matrix
    norms = np.sqrt(np.asarray(matrix.multiply(matrix).sum(axis=1)))
    assert np.allclose(norms, 1.0)


def test_train_test_split(tiny_data):
    train, test = train_test_split(tiny_data, 0.8, seed=4)
    assert (len(train), len(test)) == (160, 40)
    assert {id(e) for e in train} | {id(e) for e in test} == {id(e) for e in tiny_data}
    again, _ = train_test_split(tiny_data, 0.8, seed=4)
    assert again.fingerprint == train.fingerprint
    with pytest.raises(ConfigError):
        train_test_split(tiny_data, 0.0)


def test_gen_synthetic_is_seeded():
    a, w_a = gen_synthetic(15, 500, seed=9)
    b, w_b = gen_synthetic(15, 500, seed=9)
    c, _ = gen_synthetic(15, 500, seed=10)
    assert a.fingerprint == b.fingerprint
    assert np.array_equal(w_a, w_b)
    assert a.fingerprint != c.fingerprint


def test_gen_synthetic_frequencies():
    data, _ = gen_synthetic(10, 20000, PLaw(low=0.05, high=0.5), seed=2)
    assert np.allclose(data.stats.p, data.target_p, atol=0.02)
    assert set(np.unique(data.labels)) <= {-1.0, 1.0}


def test_gen_synthetic_squared_labels():
    data, w_star = gen_synthetic(8, 300, seed=5, task='squared')
    assert np.allclose(data.matrix @ w_star, data.labels)


def test_power_law():
    p = PLaw('power', low=0.01, high=0.8, exponent=1.0).probabilities(200, np.random.default_rng(0))
    assert p[0] == 0.8
    assert np.all(np.diff(p) <= 0.0)
    assert p.min() == 0.01
    with pytest.raises(ConfigError):
        PLaw('zipf')
    with pytest.raises(ConfigError):
        gen_synthetic(5, 10, noise=0.7)
