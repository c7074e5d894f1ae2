"""Shared-memory parallel SGD: batch-synchronous Wild AdaBatch and asynchronous Hogwild!.

Wild AdaBatch iterations run in two phases separated by barriers: every worker computes the
gradients of its contiguous slice of the batch at the current weights, then every worker
applies ``-(gamma / B) * scale(k) * grad(k)`` for each of its examples, coordinate by
coordinate. Hogwild! workers sample, read, and write without any synchronisation.
"""
import itertools
import logging
import math
import os
import threading
import time
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .aggregation import cbp_scale
from .base import Snapshot
from .context import WorkerContext, worker
from .exceptions import ConfigError, DivergenceError, EmptyDatasetError
from .losses import LossKind, loss_derivative
from .metrics import RunMetrics, geometric_checkpoints
from .sgd_engine import EvalSchedule, Evaluator, resolve_stats
from .sparse_core import Dataset, FeatureStats

logger = logging.getLogger(__name__)


class ParallelRule(str, Enum):
    WILD_ADABATCH = 'wild-adabatch'
    WILD_MINIBATCH = 'wild-minibatch'
    HOGWILD = 'hogwild'


@dataclass(frozen=True)
class ParallelConfig:
    gamma: float
    workers: int = 1
    batch: int = 1
    rule: ParallelRule = ParallelRule.WILD_ADABATCH
    sample_budget: int = 1
    seed: int = 0
    racy_writes: bool = False
    pin_cpus: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, 'rule', ParallelRule(self.rule))
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ConfigError(f"step size must be finite and non-negative, got {self.gamma}")
        if self.workers < 1:
            raise ConfigError(f"need at least one worker, got {self.workers}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch}")
        if self.sample_budget < self.batch:
            raise ConfigError(f"sample budget {self.sample_budget} is smaller than the batch {self.batch}")
        if self.rule is not ParallelRule.HOGWILD and self.batch < self.workers:
            logger.warning("batch %d smaller than %d workers leaves workers idle", self.batch, self.workers)


class SharedModel:
    """Dense weights shared by all workers.

    Element reads and writes are whole float64 words. ``fetch_add`` serialises
    read-modify-write through striped locks over contiguous coordinate blocks;
    ``racy_add`` reads then writes with no lock and may drop concurrent updates.
    """

    def __init__(self, w: np.ndarray, stripes: int = 64):
        self.w = np.array(w, dtype=np.float64)
        self.stripe_width = max(1, math.ceil(self.w.size / stripes))
        self.locks = [threading.Lock() for _ in range(math.ceil(self.w.size / self.stripe_width) or 1)]

    def read(self, indices: np.ndarray) -> np.ndarray:
        return self.w[indices]

    def fetch_add(self, indices: np.ndarray, deltas: np.ndarray) -> None:
        """Atomic per-coordinate ``w[k] += delta``; ``indices`` must be sorted and unique."""
        if indices.size == 0:
            return
        blocks = indices // self.stripe_width
        bounds = np.flatnonzero(np.diff(blocks)) + 1
        for segment, start, stop in zip(blocks[np.r_[0, bounds]], np.r_[0, bounds], np.r_[bounds, indices.size]):
            with self.locks[segment]:
                self.w[indices[start:stop]] += deltas[start:stop]

    def racy_add(self, indices: np.ndarray, deltas: np.ndarray) -> None:
        current = self.w[indices]
        self.w[indices] = current + deltas

    def snapshot(self) -> np.ndarray:
        return self.w.copy()


def _pin(cfg: ParallelConfig, worker_id: int):
    if not cfg.pin_cpus:
        return
    cpu = cfg.pin_cpus[worker_id % len(cfg.pin_cpus)]
    try:
        os.sched_setaffinity(0, {cpu})
    except (AttributeError, OSError) as exc:
        logger.debug("pinning worker %d to cpu %d failed: %s", worker_id, cpu, exc)


def _worker_streams(seed: int, workers: int) -> list[np.random.Generator]:
    """Per-worker generators; stream j depends on (seed, j) only, not on the worker count."""
    return [np.random.default_rng(child) for child in np.random.SeedSequence(seed).spawn(workers)]


class _Run:
    """State shared by the worker threads of one training run."""

    def __init__(self, data: Dataset, cfg: ParallelConfig, loss: LossKind, stats: FeatureStats,
                 w0: np.ndarray | None):
        self.data = data
        self.cfg = cfg
        self.loss = loss
        self.model = SharedModel(np.zeros(data.dim) if w0 is None else w0)
        matrix = data.matrix
        self.indptr, self.indices, self.values = matrix.indptr, matrix.indices.astype(np.int64), matrix.data
        self.labels = data.labels
        self.snapshots: list[tuple[int, float, np.ndarray]] = []
        self.errors: list[BaseException] = []
        self.barriers: list[threading.Barrier] = []
        self.diverged_at: int | None = None
        self.stop = False
        self.started = time.perf_counter()
        self.samples = 0
        self.scale = np.ones(data.dim)
        if cfg.rule is ParallelRule.WILD_ADABATCH:
            self.scale[stats.active] = cbp_scale(stats.p[stats.active], cfg.batch)
        self.apply = self.model.racy_add if cfg.racy_writes else self.model.fetch_add

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        start, stop = self.indptr[i], self.indptr[i + 1]
        return self.indices[start:stop], self.values[start:stop]

    def take_snapshot(self, samples: int) -> bool:
        """Record weights at ``samples``; return False when they are no longer finite."""
        w = self.model.snapshot()
        self.snapshots.append((samples, time.perf_counter() - self.started, w))
        return bool(np.all(np.isfinite(w)))

    def run_threads(self, target) -> float:
        threads = [threading.Thread(target=self._guard, args=(target, j), name=f"adabatch-worker-{j}")
                   for j in range(self.cfg.workers)]
        for thread in threads:
            thread.start()
        for thread in threads:
            thread.join()
        elapsed = time.perf_counter() - self.started
        if self.errors:
            raise self.errors[0]
        return elapsed

    def _guard(self, target, worker_id: int):
        try:
            target(worker_id)
        except threading.BrokenBarrierError:
            pass
        except BaseException as exc:  # pylint: disable=broad-except
            self.errors.append(exc)
            for barrier in self.barriers:
                barrier.abort()
        finally:
            worker.clear()

    def metrics(self, method: str, schedule: EvalSchedule | None, elapsed: float) -> RunMetrics:
        metrics = RunMetrics(method=method, config=Snapshot.of(self.cfg))
        evaluator = Evaluator(self.loss, self.data, schedule)
        eval_start = time.perf_counter()
        latest = 0.0
        for samples, seconds, w in sorted(self.snapshots, key=lambda s: s[0]):
            # snapshots from different threads may land out of clock order
            latest = max(latest, seconds)
            if np.all(np.isfinite(w)):
                metrics.record(evaluator.checkpoint(samples, latest, w))
        metrics.eval_seconds = time.perf_counter() - eval_start
        metrics.train_seconds = elapsed
        metrics.samples = self.samples
        metrics.weights = self.model.w
        return metrics


class _WildRun(_Run):

    def __init__(self, data, cfg, loss, stats, w0):
        super().__init__(data, cfg, loss, stats, w0)
        self.rng = np.random.default_rng(cfg.seed)
        self.iterations = cfg.sample_budget // cfg.batch
        self.points = set(geometric_checkpoints(cfg.batch, cfg.sample_budget))
        self.iteration = 0
        self.batch = np.empty(0, dtype=np.int64)
        # the action runs at the top of each iteration only; the phase barrier has none
        self.barrier = threading.Barrier(cfg.workers, action=self._between_iterations)
        self.phase = threading.Barrier(cfg.workers)
        self.barriers = [self.barrier, self.phase]
        self.streams = _worker_streams(cfg.seed, cfg.workers)

    def _between_iterations(self):
        """Barrier action, run by one thread while the weights are quiescent."""
        self.samples = self.iteration * self.cfg.batch
        if self.samples in self.points and not self.take_snapshot(self.samples):
            self.diverged_at, self.stop = self.iteration, True
            return
        if self.iteration >= self.iterations:
            self.stop = True
            return
        self.batch = self.rng.integers(0, len(self.data), size=self.cfg.batch)
        self.iteration += 1

    def work(self, worker_id: int):
        cfg = self.cfg
        start, stop = worker_id * cfg.batch // cfg.workers, (worker_id + 1) * cfg.batch // cfg.workers
        worker.update(WorkerContext(worker_id, self.streams[worker_id], start, stop))
        _pin(cfg, worker_id)
        step = cfg.gamma / cfg.batch
        while True:
            self.barrier.wait()
            if self.stop:
                return
            # phase 1: gradients at the current weights
            gradients = worker.gradients
            gradients.clear()
            for i in self.batch[worker.start:worker.stop]:
                idx, vals = self.row(i)
                derivative = loss_derivative(self.loss, float(vals @ self.model.read(idx)), self.labels[i])
                gradients.append((idx, derivative * vals))
            self.phase.wait()
            # phase 2: per-example, per-coordinate application
            for idx, grad in gradients:
                self.apply(idx, -step * self.scale[idx] * grad)
            worker.samples += len(gradients)


class _HogwildRun(_Run):

    def __init__(self, data, cfg, loss, stats, w0):
        super().__init__(data, cfg, loss, stats, w0)
        self.counter = itertools.count(1)
        self.points = set(geometric_checkpoints(1, cfg.sample_budget)) - {0, cfg.sample_budget}
        self.streams = _worker_streams(cfg.seed, cfg.workers)
        self.processed = [0] * cfg.workers

    def work(self, worker_id: int):
        cfg = self.cfg
        worker.update(WorkerContext(worker_id, self.streams[worker_id]))
        _pin(cfg, worker_id)
        n = len(self.data)
        while not self.stop:
            taken = next(self.counter)
            if taken > cfg.sample_budget:
                break
            i = int(worker.rng.integers(0, n))
            idx, vals = self.row(i)
            derivative = loss_derivative(self.loss, float(vals @ self.model.read(idx)), self.labels[i])
            self.apply(idx, -cfg.gamma * derivative * vals)
            worker.samples += 1
            self.processed[worker_id] += 1
            if taken in self.points and not self.take_snapshot(taken):
                self.diverged_at, self.stop = taken, True


def _prepare(data: Dataset, stats: FeatureStats | None, loss: LossKind) -> tuple[LossKind, FeatureStats]:
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    return LossKind(loss), resolve_stats(data, stats)


def _finish(run: _Run, method: str, schedule: EvalSchedule | None, elapsed: float) -> RunMetrics:
    metrics = run.metrics(method, schedule, elapsed)
    if run.diverged_at is not None:
        logger.warning("%s diverged at %d", method, run.diverged_at)
        raise DivergenceError(run.diverged_at, metrics)
    return metrics


def wild_train(data: Dataset, cfg: ParallelConfig, loss: LossKind, stats: FeatureStats | None = None,
               schedule: EvalSchedule | None = None, w0: np.ndarray | None = None) -> RunMetrics:
    """Batch-synchronous parallel SGD; the batch drawn each iteration depends on the seed only."""
    if cfg.rule is ParallelRule.HOGWILD:
        raise ConfigError("wild_train runs the wild-adabatch and wild-minibatch rules")
    loss, stats = _prepare(data, stats, loss)
    run = _WildRun(data, cfg, loss, stats, w0)
    elapsed = run.run_threads(run.work)
    return _finish(run, cfg.rule.value, schedule, elapsed)


def hogwild_train(data: Dataset, cfg: ParallelConfig, loss: LossKind, stats: FeatureStats | None = None,
                  schedule: EvalSchedule | None = None, w0: np.ndarray | None = None) -> RunMetrics:
    """Lock-free asynchronous SGD; workers stop once the shared sample counter passes the budget."""
    loss, stats = _prepare(data, stats, loss)
    run = _HogwildRun(data, cfg, loss, stats, w0)
    run.take_snapshot(0)
    elapsed = run.run_threads(run.work)
    run.samples = sum(run.processed)
    if run.diverged_at is None and not run.take_snapshot(run.samples):
        run.diverged_at = run.samples
    return _finish(run, ParallelRule.HOGWILD.value, schedule, elapsed)
