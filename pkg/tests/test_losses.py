import numpy as np
import pytest

from adabatch.exceptions import ConfigError, EmptyDatasetError
from adabatch.losses import (L2Metric, LossKind, curvature_constants, data_gradient, example_gradient, full_objective,
                             l2_gradient, loss_derivative, loss_second_derivative, loss_value, prediction_error,
                             prediction_loss)
from adabatch.sparse_core import Dataset, estimate_feature_probabilities, gen_synthetic


def _finite_difference(f, w, h=1e-6):
    grad = np.zeros_like(w)
    for k in range(w.size):
        step = np.zeros_like(w)
        step[k] = h
        grad[k] = (f(w + step) - f(w - step)) / (2.0 * h)
    return grad


@pytest.mark.parametrize('kind', list(LossKind))
@pytest.mark.parametrize('metric', list(L2Metric))
def test_gradient_matches_finite_differences(kind, metric, rng):
    data, _ = gen_synthetic(8, 60, seed=21, task=kind.value, noise=0.1)
    stats = data.stats
    worst = 0.0
    for _ in range(100):
        w = rng.normal(size=data.dim)
        analytic = data_gradient(kind, data, w) + l2_gradient(w, 0.3, metric, stats)
        numeric = _finite_difference(lambda v: full_objective(kind, data, v, 0.3, metric, stats), w)
        worst = max(worst, np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-3))
    assert worst <= 1e-6


def test_example_gradient_is_scaled_features(handmade):
    w = np.array([0.1, -0.2, 0.3])
    example = handmade.examples[0]
    grad = example_gradient(LossKind.SQUARED, example, w)
    margin = 0.1 * 1.0 + 0.3 * 2.0
    assert np.array_equal(grad.indices, example.features.indices)
    assert np.allclose(grad.values, (margin - 1.0) * example.features.values)


def test_logistic_derivative_at_zero():
    assert loss_derivative(LossKind.LOGISTIC, 0.0, 1.0) == -0.5
    assert loss_derivative(LossKind.LOGISTIC, 0.0, -1.0) == 0.5


def test_logistic_is_stable_at_large_margins():
    assert loss_value(LossKind.LOGISTIC, 1000.0, -1.0) == pytest.approx(1000.0)
    assert loss_value(LossKind.LOGISTIC, 1000.0, 1.0) == pytest.approx(0.0)
    assert np.isfinite(loss_derivative(LossKind.LOGISTIC, -1e6, 1.0))


@pytest.mark.parametrize('kind', list(LossKind))
def test_second_derivative(kind):
    margins = np.linspace(-3.0, 3.0, 13)
    h = 1e-6
    numeric = (loss_derivative(kind, margins + h, 1.0) - loss_derivative(kind, margins - h, 1.0)) / (2 * h)
    assert np.allclose(loss_second_derivative(kind, margins, 1.0), numeric, atol=1e-7)


def test_prediction_error(handmade):
    assert prediction_error(LossKind.LOGISTIC, handmade, np.zeros(3)) == 1.0
    w = np.array([-1.0, -1.0, 1.0])
    # margins 1, 2, 0.5, -3 against labels 1, -1, 1, -1
    assert prediction_error(LossKind.LOGISTIC, handmade, w) == 0.25
    assert prediction_error(LossKind.SQUARED, handmade, np.zeros(3)) == 1.0
    assert prediction_loss(LossKind.LOGISTIC, handmade, np.zeros(3)) == pytest.approx(np.log(2.0))


def test_objective_penalty(handmade):
    w = np.array([1.0, 2.0, 0.0])
    stats = estimate_feature_probabilities(handmade)
    base = full_objective(LossKind.SQUARED, handmade, w)
    assert full_objective(LossKind.SQUARED, handmade, w, 2.0) == pytest.approx(base + 5.0)
    assert full_objective(LossKind.SQUARED, handmade, w, 2.0, L2Metric.DIAG_P, stats) == pytest.approx(base + 1.5)
    with pytest.raises(ConfigError):
        full_objective(LossKind.SQUARED, handmade, w, 2.0, L2Metric.DIAG_P)
    with pytest.raises(ConfigError):
        full_objective(LossKind.SQUARED, handmade, w, -1.0)
    with pytest.raises(EmptyDatasetError):
        full_objective(LossKind.SQUARED, Dataset([], 3), w)


def test_curvature_constants(handmade):
    stats = estimate_feature_probabilities(handmade)
    consts = curvature_constants(LossKind.SQUARED, handmade, stats)
    assert consts.mu == pytest.approx(0.25)
    assert consts.L == pytest.approx(2.5)
    assert consts.G2 == 9.0
    assert consts.R2 == 9.0
    diag = curvature_constants(LossKind.SQUARED, handmade, stats, 0.5, L2Metric.DIAG_P)
    assert (diag.mu, diag.L) == pytest.approx((0.75, 3.0))
    identity = curvature_constants(LossKind.SQUARED, handmade, stats, 0.5, L2Metric.IDENTITY)
    assert (identity.mu, identity.L) == pytest.approx((0.75, 4.5))
    logistic = curvature_constants(LossKind.LOGISTIC, handmade, stats)
    assert (logistic.mu, logistic.M, logistic.R2) == pytest.approx((0.0, 0.25, 2.25))


def _hessian_vector(kind, data, w, v, h=1e-4):
    return (data_gradient(kind, data, w + h * v) - data_gradient(kind, data, w - h * v)) / (2.0 * h)


def _directions(dim, rng, count=40, nonzeros=3):
    for k in range(dim):
        yield np.eye(dim)[k]
    for _ in range(count):
        v = np.zeros(dim)
        v[rng.choice(dim, size=nonzeros, replace=False)] = rng.standard_normal(nonzeros)
        yield v


def test_hessian_lies_between_frequency_bounds(squared_data, logistic_data, rng):
    stats = squared_data.stats
    consts = curvature_constants(LossKind.SQUARED, squared_data, stats)
    lower, upper = consts.m * (1.0 - stats.pmax), consts.M * (1.0 + float(np.sum(stats.p)))
    w = rng.standard_normal(squared_data.dim)
    for v in _directions(squared_data.dim, rng):
        quadratic = float(v @ _hessian_vector(LossKind.SQUARED, squared_data, w, v))
        weighted = float(np.sum(stats.p * v * v))
        assert 0.95 * lower * weighted <= quadratic <= 1.05 * upper * weighted

    stats = logistic_data.stats
    consts = curvature_constants(LossKind.LOGISTIC, logistic_data, stats)
    upper = consts.M * (1.0 + float(np.sum(stats.p)))
    w = rng.standard_normal(logistic_data.dim)
    for v in _directions(logistic_data.dim, rng):
        quadratic = float(v @ _hessian_vector(LossKind.LOGISTIC, logistic_data, w, v))
        assert -1e-9 <= quadratic <= 1.05 * upper * float(np.sum(stats.p * v * v))


def test_single_coordinate_curvature_is_its_frequency(squared_data):
    w = np.zeros(squared_data.dim)
    for k in range(squared_data.dim):
        e = np.eye(squared_data.dim)[k]
        assert e @ _hessian_vector(LossKind.SQUARED, squared_data, w, e) == pytest.approx(squared_data.stats.p[k])
