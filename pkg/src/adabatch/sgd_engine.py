"""Sequential constant-step SGD with the batch-merge rules, Adagrad, and step-size bounds."""
import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, NamedTuple, Sequence

import numpy as np
import scipy.sparse as sp

from .aggregation import (BatchGradient, Preconditioner, add_support_penalty, merge_adabatch, merge_minibatch,
                          merge_reconditioned, pplus)
from .base import Snapshot
from .exceptions import ConfigError, DivergenceError, EmptyDatasetError, GridDivergedError
from .losses import (CurvatureConstants, L2Metric, LossKind, batch_derivatives, full_objective, l2_gradient,
                     loss_derivative, prediction_error, prediction_loss, support_penalty_weights)
from .metrics import Checkpoint, RunMetrics, Stopwatch, geometric_checkpoints
from .sparse_core import Dataset, Example, FeatureStats, estimate_feature_probabilities

logger = logging.getLogger(__name__)


class SgdRule(str, Enum):
    MINIBATCH = 'minibatch'
    ADABATCH = 'adabatch'
    CBP = 'cbp'
    INV_P = 'inv-p'
    ADAGRAD = 'adagrad'


class Sampling(str, Enum):
    IID = 'iid'
    SHUFFLED = 'shuffled'


@dataclass(frozen=True)
class AdagradConfig:
    alpha: float = 0.1
    epsilon: float = 0.0
    # accumulator includes the current gradient before dividing
    include_current: bool = True

    def __post_init__(self):
        if not self.alpha > 0.0:
            raise ConfigError(f"adagrad alpha must be positive, got {self.alpha}")
        if self.epsilon < 0.0:
            raise ConfigError(f"adagrad epsilon must be non-negative, got {self.epsilon}")


@dataclass(frozen=True)
class SgdConfig:
    gamma: float
    batch: int = 1
    rule: SgdRule = SgdRule.ADABATCH
    sample_budget: int = 1
    seed: int = 0
    sampling: Sampling = Sampling.IID
    l2: float = 0.0
    l2_metric: L2Metric = L2Metric.IDENTITY
    adagrad: AdagradConfig | None = None

    def __post_init__(self):
        object.__setattr__(self, 'rule', SgdRule(self.rule))
        object.__setattr__(self, 'sampling', Sampling(self.sampling))
        object.__setattr__(self, 'l2_metric', L2Metric(self.l2_metric))
        if not (math.isfinite(self.gamma) and self.gamma >= 0.0):
            raise ConfigError(f"step size must be finite and non-negative, got {self.gamma}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch}")
        if self.sample_budget < self.batch:
            raise ConfigError(f"sample budget {self.sample_budget} is smaller than the batch {self.batch}")
        if self.l2 < 0.0:
            raise ConfigError("l2 must be non-negative")
        if self.rule is SgdRule.ADAGRAD and self.adagrad is None:
            object.__setattr__(self, 'adagrad', AdagradConfig())

    @property
    def iterations(self) -> int:
        return self.sample_budget // self.batch


@dataclass(eq=False)
class TrainState:
    w: np.ndarray
    rng: np.random.Generator
    samples_seen: int = 0
    iteration: int = 0
    accumulator: np.ndarray | None = None
    order: np.ndarray | None = field(default=None, repr=False)
    cursor: int = 0

    @classmethod
    def start(cls, dim: int, seed: int, w0: np.ndarray | None = None, adagrad: bool = False) -> 'TrainState':
        w = np.zeros(dim) if w0 is None else np.array(w0, dtype=np.float64)
        return cls(w=w, rng=np.random.default_rng(seed), accumulator=np.zeros(dim) if adagrad else None)


class Batch(NamedTuple):
    rows: sp.csr_matrix
    labels: np.ndarray

    @classmethod
    def of(cls, data: Dataset, indices: np.ndarray) -> 'Batch':
        return cls(data.matrix[indices], data.labels[indices])

    @classmethod
    def from_examples(cls, examples: Sequence[Example], dim: int) -> 'Batch':
        data = Dataset(list(examples), dim)
        return cls(data.matrix, data.labels)

    @property
    def size(self) -> int:
        return self.rows.shape[0]


def draw_indices(state: TrainState, n: int, B: int, sampling: Sampling = Sampling.IID) -> np.ndarray:
    """Row indices of the next batch: i.i.d. with replacement, or consecutive slices of reshuffled passes."""
    if Sampling(sampling) is Sampling.IID:
        return state.rng.integers(0, n, size=B)
    picked = []
    remaining = B
    while remaining:
        if state.order is None or state.cursor >= n:
            state.order = state.rng.permutation(n)
            state.cursor = 0
        chunk = state.order[state.cursor:state.cursor + remaining]
        state.cursor += chunk.size
        remaining -= chunk.size
        picked.append(chunk)
    return np.concatenate(picked)


def _check_finite(state: TrainState, indices: np.ndarray | None = None):
    values = state.w if indices is None else state.w[indices]
    if not np.all(np.isfinite(values)):
        logger.warning("divergence at iteration %d", state.iteration)
        raise DivergenceError(state.iteration)


def merged_gradient(bg: BatchGradient, rule: SgdRule, pre: Preconditioner | None = None):
    if rule is SgdRule.MINIBATCH or rule is SgdRule.ADAGRAD:
        return merge_minibatch(bg)
    if rule is SgdRule.ADABATCH:
        return merge_adabatch(bg)
    return merge_reconditioned(bg, pre)


def decay_idle_coordinates(w: np.ndarray, gamma: float, l2: float, l2_metric: L2Metric,
                           penalty: np.ndarray) -> bool:
    """Identity penalty on coordinates no example touches; returns whether anything moved."""
    if L2Metric(l2_metric) is not L2Metric.IDENTITY:
        return False
    idle = np.isnan(penalty)
    if not idle.any():
        return False
    w[idle] *= 1.0 - gamma * l2
    return True


def sgd_step(state: TrainState, batch: Batch, cfg: SgdConfig, loss: LossKind, stats: FeatureStats | None = None,
             pre: Preconditioner | None = None, penalty: np.ndarray | None = None) -> TrainState:
    """w <- w - gamma * merge(batch gradients at w), all gradients at the pre-update w.

    The l2 term rides on each example's support (see ``support_penalty_weights``), so every
    merge rule has the regularised objective's minimiser as its fixed point.
    """
    if batch.size != cfg.batch:
        raise ConfigError(f"expected a batch of {cfg.batch} examples, got {batch.size}")
    if cfg.rule is SgdRule.ADAGRAD:
        return adagrad_step(state, batch, cfg.adagrad, loss, l2=cfg.l2, l2_metric=cfg.l2_metric, stats=stats)
    if cfg.rule in (SgdRule.CBP, SgdRule.INV_P) and pre is None:
        if stats is None:
            raise ConfigError(f"rule {cfg.rule.value} needs feature statistics")
        pre = Preconditioner.build(stats, cfg.batch, 'cbp' if cfg.rule is SgdRule.CBP else 'inv-p')
    derivatives = batch_derivatives(loss, batch.rows, batch.labels, state.w)
    bg = BatchGradient.from_rows(batch.rows, derivatives, cfg.batch)
    moved_idle = False
    if cfg.l2 > 0.0:
        if penalty is None:
            penalty = support_penalty_weights(cfg.l2, cfg.l2_metric, stats)
        bg = add_support_penalty(bg, state.w, penalty)
        moved_idle = decay_idle_coordinates(state.w, cfg.gamma, cfg.l2, cfg.l2_metric, penalty)
    g = merged_gradient(bg, cfg.rule, pre)
    state.w[g.indices] -= cfg.gamma * g.values
    state.iteration += 1
    state.samples_seen += cfg.batch
    _check_finite(state, None if moved_idle else g.indices)
    return state


def adagrad_step(state: TrainState, batch: Batch, acfg: AdagradConfig, loss: LossKind, l2: float = 0.0,
                 l2_metric: L2Metric = L2Metric.IDENTITY, stats: FeatureStats | None = None) -> TrainState:
    """w(k) <- w(k) - alpha g(k) / sqrt(eps + sum_i g_i(k)^2) with g the mini-batch average gradient.

    A zero denominator (eps = 0 and no gradient seen yet on k) leaves the coordinate in place.
    """
    if state.accumulator is None:
        state.accumulator = np.zeros_like(state.w)
    derivatives = batch_derivatives(loss, batch.rows, batch.labels, state.w)
    g_sparse = merge_minibatch(BatchGradient.from_rows(batch.rows, derivatives, batch.size))
    if l2 > 0.0:
        indices = np.arange(state.w.size)
        g = l2_gradient(state.w, l2, l2_metric, stats)
        g[g_sparse.indices] += g_sparse.values
    else:
        indices, g = g_sparse.indices, g_sparse.values
    acc = state.accumulator
    if acfg.include_current:
        acc[indices] += g * g
        denom = np.sqrt(acfg.epsilon + acc[indices])
    else:
        denom = np.sqrt(acfg.epsilon + acc[indices])
        acc[indices] += g * g
    step = np.divide(acfg.alpha * g, denom, out=np.zeros_like(g), where=denom > 0.0)
    state.w[indices] -= step
    state.iteration += 1
    state.samples_seen += batch.size
    _check_finite(state, indices)
    return state


@dataclass
class EvalSchedule:
    """What to measure at checkpoints: optional held-out data and reference optimum F_*."""
    test: Dataset | None = None
    f_star: float | None = None
    growth: float = 2.0


class Evaluator:

    def __init__(self, loss: LossKind, data: Dataset, schedule: EvalSchedule | None, l2: float = 0.0,
                 l2_metric: L2Metric = L2Metric.IDENTITY, stats: FeatureStats | None = None):
        self.loss = loss
        self.data = data
        self.schedule = schedule or EvalSchedule()
        self.l2 = l2
        self.l2_metric = l2_metric
        self.stats = stats

    def checkpoint(self, samples: int, seconds: float, w: np.ndarray) -> Checkpoint:
        objective = full_objective(self.loss, self.data, w, self.l2, self.l2_metric, self.stats)
        test = self.schedule.test
        has_test = test is not None and len(test) > 0
        f_star = self.schedule.f_star
        return Checkpoint(samples=samples, seconds=seconds, objective=objective,
                          test_error=prediction_error(self.loss, test, w) if has_test else None,
                          test_loss=prediction_loss(self.loss, test, w) if has_test else None,
                          gap=objective - f_star if f_star is not None else None)


def resolve_stats(data: Dataset, stats: FeatureStats | None) -> FeatureStats:
    if stats is not None:
        return stats
    if data.stats is not None:
        return data.stats
    return estimate_feature_probabilities(data)


def train(data: Dataset, cfg: SgdConfig, loss: LossKind, stats: FeatureStats | None = None,
          schedule: EvalSchedule | None = None, w0: np.ndarray | None = None) -> RunMetrics:
    """Run ``sample_budget // batch`` iterations and record geometric checkpoints."""
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    loss = LossKind(loss)
    stats = resolve_stats(data, stats)
    schedule = schedule or EvalSchedule()
    evaluator = Evaluator(loss, data, schedule, cfg.l2, cfg.l2_metric, stats)
    pre = None
    if cfg.rule in (SgdRule.CBP, SgdRule.INV_P):
        pre = Preconditioner.build(stats, cfg.batch, 'cbp' if cfg.rule is SgdRule.CBP else 'inv-p')
    penalty = None
    if cfg.l2 > 0.0 and cfg.rule is not SgdRule.ADAGRAD:
        penalty = support_penalty_weights(cfg.l2, cfg.l2_metric, stats)
    state = TrainState.start(data.dim, cfg.seed, w0, adagrad=cfg.rule is SgdRule.ADAGRAD)
    metrics = RunMetrics(method=f"sgd-{cfg.rule.value}", config=Snapshot.of(cfg))
    points = set(geometric_checkpoints(cfg.batch, cfg.sample_budget, schedule.growth))
    clock = Stopwatch()
    n = len(data)

    def observe():
        with clock.evaluating():
            metrics.record(evaluator.checkpoint(state.samples_seen, clock.train, state.w))

    observe()
    try:
        for _ in range(cfg.iterations):
            with clock.training():
                batch = Batch.of(data, draw_indices(state, n, cfg.batch, cfg.sampling))
                sgd_step(state, batch, cfg, loss, stats, pre, penalty)
            if state.samples_seen in points:
                observe()
    except DivergenceError as exc:
        metrics.samples, metrics.train_seconds, metrics.eval_seconds = state.samples_seen, clock.train, clock.evaluation
        exc.metrics = metrics
        raise
    metrics.samples = state.samples_seen
    metrics.train_seconds = clock.train
    metrics.eval_seconds = clock.evaluation
    metrics.weights = state.w
    return metrics


def max_stable_step(rule: SgdRule | str, consts: CurvatureConstants, stats: FeatureStats, B: int) -> float:
    """Largest gamma of the step-size condition for ``rule``.

    minibatch: gamma [L pmax + 2 R2 / B] <= 1; adabatch and cbp: gamma [L + 2 R2] <= 1;
    inv-p: gamma [L + 2 R2 / (pmin B)] <= 1.
    """
    rule = SgdRule(rule)
    if rule is SgdRule.MINIBATCH:
        return 1.0 / (consts.L * stats.pmax + 2.0 * consts.R2 / B)
    if rule in (SgdRule.ADABATCH, SgdRule.CBP):
        return 1.0 / (consts.L + 2.0 * consts.R2)
    if rule is SgdRule.INV_P:
        return 1.0 / (consts.L + 2.0 * consts.R2 / (stats.pmin * B))
    raise ConfigError("adagrad has no constant step-size bound")


def dense_max_step(consts: CurvatureConstants, B: int) -> float:
    """gamma [L (1 - 1/B) + 2 R2 / B] <= 1, the non-sparse mini-batch condition."""
    return 1.0 / (consts.L * (1.0 - 1.0 / B) + 2.0 * consts.R2 / B)


def bias_variance_bound(rule: SgdRule | str, consts: CurvatureConstants, stats: FeatureStats, gamma: float, B: int,
                        N: int, delta0: float, sigma2: float) -> tuple[float, float]:
    """Bias (decaying initial condition) and variance (noise floor) terms of the rate for ``rule``."""
    rule = SgdRule(rule)
    iterations = N / B
    if rule is SgdRule.MINIBATCH:
        contraction, variance = gamma * stats.pmin * consts.mu / 2.0, gamma * 2.0 * sigma2 / B
    elif rule in (SgdRule.ADABATCH, SgdRule.CBP):
        contraction, variance = gamma * pplus(stats.pmin, B) * consts.mu / 2.0, 2.0 * gamma * sigma2
    elif rule is SgdRule.INV_P:
        contraction, variance = gamma * consts.mu / 2.0, gamma * 2.0 * sigma2 / (stats.pmin * B)
    else:
        raise ConfigError("adagrad has no constant step-size rate")
    return (1.0 - contraction) ** iterations * delta0 / gamma, variance


def gradient_variance(loss: LossKind, data: Dataset, w: np.ndarray) -> float:
    """sigma^2 = E ||f'(w)||^2 over the dataset."""
    if len(data) == 0:
        raise EmptyDatasetError("gradient variance of an empty dataset")
    derivatives = loss_derivative(loss, data.matrix @ w, data.labels)
    row_norms = np.asarray(data.matrix.multiply(data.matrix).sum(axis=1)).ravel()
    return float(np.mean(derivatives ** 2 * row_norms))


def averaged_iterate(iterates: Sequence[np.ndarray], gamma: float, mu_pplus: float) -> np.ndarray:
    """Tail average with weights (1 - gamma mu / 2)^(N - n)."""
    if len(iterates) == 0:
        raise ConfigError("no iterates to average")
    decay = 1.0 - gamma * mu_pplus / 2.0
    if not 0.0 < decay <= 1.0:
        raise ConfigError(f"decay factor must lie in (0, 1], got {decay}")
    weights = decay ** np.arange(len(iterates) - 1, -1, -1, dtype=np.float64)
    return np.tensordot(weights, np.asarray(iterates), axes=1) / weights.sum()


def power_of_two_grid(lo: float, hi: float) -> list[float]:
    if not 0.0 < lo <= hi:
        raise ConfigError(f"grid bounds need 0 < lo <= hi, got [{lo}, {hi}]")
    if lo == hi:
        return [lo]
    exponents = range(math.ceil(math.log2(lo)), math.floor(math.log2(hi)) + 1)
    return [2.0 ** e for e in exponents] or [lo]


@dataclass
class GridPoint:
    value: float
    objective: float | None
    diverged: bool
    metrics: RunMetrics | None = field(default=None, repr=False)


@dataclass
class GridResult:
    best: GridPoint
    points: list[GridPoint]

    def table(self) -> list[dict]:
        return [{'gamma': p.value, 'objective': 'diverged' if p.diverged else p.objective,
                 'selected': p is self.best} for p in self.points]


def grid_search(values: Sequence[float], run: Callable[[float], RunMetrics],
                score: Callable[[RunMetrics], float]) -> GridResult:
    """Run every grid value, drop diverged runs and keep the lowest score."""
    points = []
    for value in values:
        try:
            metrics = run(value)
            objective = score(metrics)
            diverged = not math.isfinite(objective)
        except DivergenceError as exc:
            metrics, objective, diverged = exc.metrics, None, True
        logger.info("grid value %g: %s", value, 'diverged' if diverged else objective)
        points.append(GridPoint(value, None if diverged else objective, diverged, metrics))
    candidates = [p for p in points if not p.diverged]
    if not candidates:
        raise GridDivergedError(f"all {len(points)} grid runs diverged")
    return GridResult(min(candidates, key=lambda p: p.objective), points)


def sgd_grid(data: Dataset, valid: Dataset, cfg: SgdConfig, loss: LossKind, stats: FeatureStats | None,
             lo: float, hi: float) -> GridResult:
    """Power-of-two grid over gamma (over alpha for Adagrad), scored by final validation objective."""
    stats = resolve_stats(data, stats)

    def run(value):
        if cfg.rule is SgdRule.ADAGRAD:
            return train(data, replace(cfg, adagrad=replace(cfg.adagrad, alpha=value)), loss, stats)
        return train(data, replace(cfg, gamma=value), loss, stats)

    def score(metrics):
        return full_objective(loss, valid, metrics.weights, cfg.l2, cfg.l2_metric, stats)

    return grid_search(power_of_two_grid(lo, hi), run, score)
