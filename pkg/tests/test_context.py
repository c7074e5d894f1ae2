from multiprocessing.pool import ThreadPool

import numpy as np
import pytest

from adabatch.context import ContextProxy, WorkerContext, worker


def test_proxy_isolation():
    prop = ContextProxy('property')
    contexts = [WorkerContext(x, np.random.default_rng(x)) for x in range(100)]
    result = []
    tp = ThreadPool(6)

    def connect():
        prop.update(contexts.pop())

    def task():
        result.append(prop.worker_id)
        prop.gradients = []
        prop.gradients.append('-')
        result.append(''.join(prop.gradients))

    def prepare(_):
        connect()
        task()

    tp.map(prepare, range(10))
    tp.map(prepare, range(10))
    tp.close()
    max_dashes = max(map(len, filter(lambda x: isinstance(x, str) and x.startswith('-'), result)))
    assert max_dashes == 1
    assert len(result) == 40
    assert len({x for x in result if isinstance(x, int)}) == 20


def test_unbound_proxy():
    proxy = ContextProxy('nothing')
    assert not proxy.bound
    with pytest.raises(AttributeError):
        _ = proxy.worker_id
    proxy.update(WorkerContext(3, np.random.default_rng(0), start=5, stop=9))
    assert proxy.bound
    assert (proxy.start, proxy.stop) == (5, 9)
    assert proxy.missing is None
    proxy.samples += 4
    assert proxy.samples == 4
    proxy.clear()
    assert not proxy.bound
    proxy.clear()


def test_worker_proxy_is_per_thread():
    worker.update(WorkerContext(0, np.random.default_rng(0)))
    seen = []

    def other(_):
        seen.append(worker.bound)

    with ThreadPool(2) as tp:
        tp.map(other, range(2))
    assert seen == [False, False]
    assert worker.worker_id == 0
    worker.clear()
