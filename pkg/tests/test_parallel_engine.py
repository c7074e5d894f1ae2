import logging
import threading

import numpy as np
import pytest

from adabatch.context import worker
from adabatch.exceptions import ConfigError, DivergenceError, EmptyDatasetError
from adabatch.losses import LossKind
from adabatch.metrics import throughput_report
from adabatch.parallel_engine import ParallelConfig, ParallelRule, SharedModel, hogwild_train, wild_train
from adabatch.sgd_engine import (Batch, EvalSchedule, SgdConfig, SgdRule, TrainState, draw_indices,
                                 power_of_two_grid, sgd_step, train)
from adabatch.sparse_core import Dataset, PLaw, gen_synthetic, train_test_split


def test_config_validation(caplog):
    with pytest.raises(ConfigError):
        ParallelConfig(gamma=0.1, workers=0)
    with pytest.raises(ConfigError):
        ParallelConfig(gamma=-0.1)
    with pytest.raises(ConfigError):
        ParallelConfig(gamma=0.1, batch=10, sample_budget=9)
    with caplog.at_level(logging.WARNING):
        ParallelConfig(gamma=0.1, workers=4, batch=2, sample_budget=10)
    assert 'leaves workers idle' in caplog.text
    assert ParallelConfig(gamma=0.1, rule='hogwild').rule is ParallelRule.HOGWILD


def test_fetch_add_is_atomic():
    model = SharedModel(np.zeros(300), stripes=7)
    indices = np.arange(0, 300, 3)

    def hammer():
        for _ in range(500):
            model.fetch_add(indices, np.ones(indices.size))

    threads = [threading.Thread(target=hammer) for _ in range(8)]
    for thread in threads:
        thread.start()
    for thread in threads:
        thread.join()
    assert np.all(model.w[indices] == 4000.0)
    assert np.all(np.delete(model.w, indices) == 0.0)


def test_reads_never_see_torn_values():
    base, step = float.fromhex('0x1.5555555555555p+0'), 2.0 ** -10
    model = SharedModel(np.full(256, base), stripes=8)
    indices = np.arange(256)
    seen = []
    done = threading.Event()

    def write():
        for _ in range(300):
            model.fetch_add(indices, np.full(indices.size, step))
            model.fetch_add(indices, np.full(indices.size, -step))

    def read():
        while not done.is_set() and len(seen) < 5000:
            seen.append(model.read(indices))

    writers = [threading.Thread(target=write) for _ in range(4)]
    reader = threading.Thread(target=read)
    reader.start()
    for thread in writers:
        thread.start()
    for thread in writers:
        thread.join()
    done.set()
    reader.join()
    seen.append(model.read(indices))
    offsets = (np.concatenate(seen) - base) / step
    assert np.array_equal(offsets, np.round(offsets))
    assert offsets.min() >= 0.0 and offsets.max() <= 4.0
    assert np.all(model.w == base)


def test_racy_add_single_thread():
    model = SharedModel(np.ones(4))
    model.racy_add(np.array([1, 3]), np.array([2.0, -1.0]))
    assert np.array_equal(model.snapshot(), [1.0, 3.0, 1.0, 0.0])


@pytest.mark.parametrize('rule, sequential', [
    (ParallelRule.WILD_ADABATCH, SgdRule.CBP),
    (ParallelRule.WILD_MINIBATCH, SgdRule.MINIBATCH),
])
def test_single_worker_matches_sequential(logistic_data, rule, sequential):
    wild = wild_train(logistic_data, ParallelConfig(gamma=0.5, batch=10, rule=rule, sample_budget=2000, seed=4),
                      LossKind.LOGISTIC)
    seq = train(logistic_data, SgdConfig(gamma=0.5, batch=10, rule=sequential, sample_budget=2000, seed=4),
                LossKind.LOGISTIC)
    assert np.allclose(wild.weights, seq.weights, rtol=1e-9, atol=1e-12)
    assert [c.samples for c in wild.checkpoints] == [c.samples for c in seq.checkpoints]
    assert wild.samples == 2000


def test_one_iteration_applies_the_whole_batch(logistic_data):
    cfg = ParallelConfig(gamma=0.5, batch=10, sample_budget=10, seed=4)
    wild = wild_train(logistic_data, cfg, LossKind.LOGISTIC)
    state = TrainState.start(logistic_data.dim, 4)
    batch = Batch.of(logistic_data, draw_indices(state, len(logistic_data), 10))
    sgd_step(state, batch, SgdConfig(gamma=0.5, batch=10, rule='cbp', sample_budget=10), LossKind.LOGISTIC,
             logistic_data.stats)
    assert np.count_nonzero(state.w) > 0
    assert np.allclose(wild.weights, state.w, rtol=1e-12, atol=1e-15)
    assert [c.samples for c in wild.checkpoints] == [0, 10]


def _weights_by_workers(data, budget):
    return {W: wild_train(data, ParallelConfig(gamma=0.5, workers=W, batch=50, sample_budget=budget, seed=2),
                          LossKind.LOGISTIC).weights
            for W in (1, 2, 4)}


def test_wild_adabatch_does_not_depend_on_worker_count(logistic_data):
    weights = _weights_by_workers(logistic_data, 10000)
    for W in (2, 4):
        assert np.allclose(weights[W], weights[1], rtol=1e-6, atol=1e-12)


def test_worker_context_is_cleared(logistic_data):
    wild_train(logistic_data, ParallelConfig(gamma=0.5, workers=2, batch=4, sample_budget=40), LossKind.LOGISTIC)
    assert not worker.bound


def test_wild_train_rejects_hogwild(logistic_data):
    with pytest.raises(ConfigError):
        wild_train(logistic_data, ParallelConfig(gamma=0.5, rule='hogwild'), LossKind.LOGISTIC)
    with pytest.raises(EmptyDatasetError):
        wild_train(Dataset([], 3), ParallelConfig(gamma=0.5), LossKind.LOGISTIC)


def test_wild_divergence(squared_data):
    with pytest.raises(DivergenceError) as exc:
        wild_train(squared_data, ParallelConfig(gamma=1e4, workers=2, batch=2, sample_budget=20000),
                   LossKind.SQUARED)
    assert exc.value.metrics.checkpoints[0].samples == 0


@pytest.mark.parametrize('racy', [False, True])
def test_hogwild_processes_exact_budget(logistic_data, racy):
    cfg = ParallelConfig(gamma=0.2, workers=4, rule='hogwild', sample_budget=3000, seed=6, racy_writes=racy)
    metrics = hogwild_train(logistic_data, cfg, LossKind.LOGISTIC)
    assert metrics.samples == 3000
    samples = [c.samples for c in metrics.checkpoints]
    assert samples[0] == 0 and samples[-1] == 3000
    assert samples == sorted(samples)
    assert metrics.final.objective < metrics.checkpoints[0].objective
    assert metrics.method == 'hogwild'


@pytest.mark.slow
def test_parallel_quality_parity():
    data, _ = gen_synthetic(50, 20000, PLaw(low=0.02, high=0.5), noise=0.05, seed=13)
    train_set, test = train_test_split(data, 0.8, seed=1)
    schedule = EvalSchedule(test=test)
    budget = 5 * len(train_set)
    single_sample = power_of_two_grid(2.0 ** -6, 2.0 ** 2)
    batched = power_of_two_grid(2.0 ** -4, 2.0 ** 4)

    def best(run, gammas):
        results = []
        for gamma in gammas:
            try:
                results.append(run(gamma))
            except DivergenceError:
                continue
        return min(results, key=lambda m: m.final.test_error)

    sequential = best(lambda g: train(train_set, SgdConfig(gamma=g, rule='minibatch', sample_budget=budget),
                                      LossKind.LOGISTIC, schedule=schedule), single_sample)
    runs = []
    for W in (1, 4):
        runs.append(best(lambda g: wild_train(
            train_set, ParallelConfig(gamma=g, workers=W, batch=50, sample_budget=budget), LossKind.LOGISTIC,
            schedule=schedule), batched))
        runs.append(best(lambda g: hogwild_train(
            train_set, ParallelConfig(gamma=g, workers=W, rule='hogwild', sample_budget=budget), LossKind.LOGISTIC,
            schedule=schedule), single_sample))
    for metrics in runs:
        if metrics.config.workers == 4:
            assert metrics.final.test_error <= 1.05 * sequential.final.test_error
    logging.getLogger(__name__).info("throughput: %s", throughput_report(runs))
