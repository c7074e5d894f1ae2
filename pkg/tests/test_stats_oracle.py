import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adabatch.exceptions import ConfigError, EnumerationTooLarge, PreconditionError
from adabatch.losses import LossKind, data_gradient
from adabatch.stats_oracle import (DiscreteLaw, binomial_weights, brute_force_moments, check_reconditioned_expectation,
                                   inverse_count_expectation, inverse_weight_sum, lemma1_mean, lemma1_second_moment,
                                   lemma1_second_moment_bound, lemma2_bound, monte_carlo_adabatch_expectation,
                                   random_law, run_lemma_suite)

COIN = DiscreteLaw(((0.0, 0.5), (1.0, 0.5)))


def test_law_validation():
    with pytest.raises(ConfigError):
        DiscreteLaw(((0.0, 0.5), (1.0, 0.6)))
    with pytest.raises(ConfigError):
        DiscreteLaw(((0.0, 1.5), (1.0, -0.5)))
    with pytest.raises(ConfigError):
        lemma1_mean(DiscreteLaw(((0.0, 1.0),)), 3)
    with pytest.raises(ConfigError):
        lemma1_mean(COIN, 0)
    assert (COIN.p, COIN.mean, COIN.second_moment) == (0.5, 0.5, 0.5)


def test_fair_coin_pair():
    assert brute_force_moments(COIN, 2) == (0.75, 0.75)
    assert lemma1_mean(COIN, 2) == pytest.approx(0.75, abs=1e-15)
    assert lemma1_second_moment(COIN, 2) == pytest.approx(0.75, abs=1e-15)


def test_deterministic_law():
    law = DiscreteLaw(((2.0, 1.0),))
    for N in (1, 4, 9):
        assert lemma1_mean(law, N) == 2.0
        assert lemma1_second_moment(law, N) == pytest.approx(4.0)
        assert brute_force_moments(law, N) == (2.0, 4.0)
        assert lemma1_second_moment_bound(law, N) == 8.0


def test_single_draw_second_moment():
    law = DiscreteLaw(((0.0, 0.5), (3.0, 0.5)))
    assert lemma1_second_moment(law, 1) == pytest.approx(law.second_moment)
    # the bound is tight only for centred laws
    assert lemma1_second_moment_bound(law, 1) > lemma1_second_moment(law, 1)
    centred = DiscreteLaw(((-1.0, 0.5), (1.0, 0.5)))
    assert lemma1_second_moment_bound(centred, 1) == pytest.approx(lemma1_second_moment(centred, 1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 6))
def test_closed_forms_match_enumeration(seed, N):
    law = random_law(np.random.default_rng(seed))
    mean, second = brute_force_moments(law, N)
    assert lemma1_mean(law, N) == pytest.approx(mean, rel=1e-12, abs=1e-12)
    assert lemma1_second_moment(law, N) == pytest.approx(second, rel=1e-12, abs=1e-12)
    assert lemma1_second_moment_bound(law, N) >= second - 1e-12


def test_enumeration_limit():
    law = DiscreteLaw(((0.0, 0.2), (1.0, 0.4), (-2.0, 0.4)))
    with pytest.raises(EnumerationTooLarge):
        brute_force_moments(law, 15)


def test_lemma2_bound():
    law = DiscreteLaw(((0.0, 0.5), (1.0, 0.25), (-3.0, 0.25)))
    with pytest.raises(PreconditionError):
        lemma2_bound(law, 9)
    for N in (10, 20, 40):
        assert lemma2_bound(law, N) >= lemma1_second_moment(law, N)


def test_inverse_counts():
    assert inverse_count_expectation(1, 0.3) == pytest.approx(1.0)
    assert inverse_weight_sum(2, 0.5) == pytest.approx(0.625)
    assert inverse_count_expectation(4, 1.0) == 0.25
    for N in (5, 10, 64):
        assert inverse_count_expectation(N, 0.5) <= 5.0 / (N * 0.5)
    with pytest.raises(ConfigError):
        inverse_count_expectation(3, 0.0)


def test_binomial_weights():
    small = binomial_weights(3, 0.5)
    assert np.allclose(small, [0.375, 0.375, 0.125])
    with pytest.raises(ValueError):
        small[0] = 1.0
    assert binomial_weights(3, 0.5) is small
    large = binomial_weights(200, 0.05)
    assert large.sum() == pytest.approx(1.0 - 0.95 ** 200)


def test_monte_carlo_needs_enough_trials(logistic_data):
    with pytest.raises(PreconditionError):
        monte_carlo_adabatch_expectation(logistic_data, np.zeros(logistic_data.dim), 2, LossKind.LOGISTIC,
                                         trials=100)


def test_monte_carlo_single_sample_is_the_gradient(logistic_data, rng):
    w = rng.normal(size=logistic_data.dim)
    estimate = monte_carlo_adabatch_expectation(logistic_data, w, 1, LossKind.LOGISTIC, seed=5)
    expected = data_gradient(LossKind.LOGISTIC, logistic_data, w)
    assert estimate.trials == 10 ** 4
    assert np.all(np.abs(estimate.mean - expected) <= 5.0 * estimate.stderr + 1e-12)


def test_monte_carlo_is_seeded(logistic_data):
    w = np.zeros(logistic_data.dim)
    a = monte_carlo_adabatch_expectation(logistic_data, w, 3, LossKind.LOGISTIC, seed=2, chunk=1000)
    b = monte_carlo_adabatch_expectation(logistic_data, w, 3, LossKind.LOGISTIC, seed=2, chunk=1000)
    assert np.array_equal(a.mean, b.mean)


def test_reconditioned_expectation_small():
    result = check_reconditioned_expectation(10 ** 4, seed=1, batches=(2, 10), points=1)
    assert result.passed, result.detail


@pytest.mark.slow
def test_reconditioned_expectation_full():
    result = check_reconditioned_expectation(10 ** 6)
    assert result.passed, result.detail


def test_lemma_suite():
    report = run_lemma_suite()
    assert report.passed, report.rows()
    assert len(report.rows()) == 5
    assert {row['status'] for row in report.rows()} == {'pass'}
