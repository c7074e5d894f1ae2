"""SVRG with mini-batch and AdaBatch merge rules.

The anchored full gradient enters coordinate k as F'(y)(k) / p(k) once per batch member
whose support contains k, so an inner step only touches the union of the batch supports.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse as sp
from scipy.sparse.linalg import cg

from .aggregation import BatchGradient, add_support_penalty, pplus
from .base import Snapshot
from .cache import redis_cache
from .exceptions import ConfigError, DivergenceError, EmptyDatasetError, PreconditionError, StatsMismatchError
from .losses import (CurvatureConstants, L2Metric, LossKind, batch_derivatives, full_objective, l2_gradient,
                     support_penalty_weights)
from .metrics import RunMetrics, Stopwatch
from .sgd_engine import (Batch, EvalSchedule, Evaluator, TrainState, decay_idle_coordinates, draw_indices,
                         resolve_stats)
from .sparse_core import Dataset, FeatureStats

logger = logging.getLogger(__name__)

DENSE_SOLVE_MAX_DIM = 4096


class SvrgRule(str, Enum):
    MINIBATCH = 'minibatch'
    ADABATCH = 'adabatch'


@dataclass(frozen=True)
class SvrgConfig:
    gamma: float
    m: int
    batch: int = 1
    rule: SvrgRule = SvrgRule.ADABATCH
    outer_epochs: int = 10
    seed: int = 0
    l2: float = 0.0
    l2_metric: L2Metric = L2Metric.IDENTITY

    def __post_init__(self):
        object.__setattr__(self, 'rule', SvrgRule(self.rule))
        object.__setattr__(self, 'l2_metric', L2Metric(self.l2_metric))
        if not (math.isfinite(self.gamma) and self.gamma > 0.0):
            raise ConfigError(f"step size must be positive, got {self.gamma}")
        if self.m < 1:
            raise ConfigError(f"epoch length m must be >= 1, got {self.m}")
        if self.batch < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch}")
        if self.outer_epochs < 0:
            raise ConfigError("outer epochs must be >= 0")
        if self.l2 < 0.0:
            raise ConfigError("l2 must be non-negative")


@dataclass(frozen=True, eq=False)
class EpochAnchor:
    y: np.ndarray
    full_grad: np.ndarray
    scaled_full_grad: np.ndarray


def full_gradient(data: Dataset, loss: LossKind, w: np.ndarray, l2: float = 0.0,
                  l2_metric: L2Metric = L2Metric.IDENTITY, stats: FeatureStats | None = None,
                  chunk: int = 8192) -> np.ndarray:
    """Exact average gradient plus the penalty gradient; rows reduced in fixed chunks, in order."""
    n = len(data)
    if n == 0:
        raise EmptyDatasetError("full gradient of an empty dataset")
    matrix, labels = data.matrix, data.labels
    total = np.zeros(data.dim)
    for start in range(0, n, chunk):
        rows = matrix[start:start + chunk]
        total += rows.T @ batch_derivatives(loss, rows, labels[start:start + chunk], w)
    return total / n + l2_gradient(w, l2, l2_metric, stats or data.stats)


def build_anchor(data: Dataset, loss: LossKind, y: np.ndarray, stats: FeatureStats, l2: float = 0.0,
                 l2_metric: L2Metric = L2Metric.IDENTITY) -> EpochAnchor:
    """Snapshot y with its full gradient F'(y), penalty included, and the sparsity-preserving F'(y) / p."""
    grad = full_gradient(data, loss, y)
    active = stats.active
    if np.any(grad[~active] != 0.0):
        raise StatsMismatchError(int(np.flatnonzero(~active & (grad != 0.0))[0]))
    if l2 > 0.0:
        grad[active] += l2_gradient(y, l2, l2_metric, stats)[active]
    scaled = np.zeros_like(grad)
    scaled[active] = grad[active] / stats.p[active]
    return EpochAnchor(y=y.copy(), full_grad=grad, scaled_full_grad=scaled)


def svrg_step(state: TrainState, batch: Batch, anchor: EpochAnchor, cfg: SvrgConfig, loss: LossKind,
              stats: FeatureStats, penalty: np.ndarray | None = None) -> TrainState:
    """One inner step: update(k) = gamma / C(k) (sum_D [f'_b(w) - f'_b(y)](k) + |D(k)| F'(y)(k) / p(k)).

    C(k) = B for the mini-batch rule and |D(k)| for AdaBatch. Each f_b carries its share of
    the penalty on its support, so the correction vanishes at w = y = w_*.
    """
    differences = (batch_derivatives(loss, batch.rows, batch.labels, state.w)
                   - batch_derivatives(loss, batch.rows, batch.labels, anchor.y))
    bg = BatchGradient.from_rows(batch.rows, differences, cfg.batch)
    indices = bg.indices
    missing = stats.p[indices] == 0.0
    if np.any(missing):
        raise StatsMismatchError(int(indices[np.argmax(missing)]))
    moved_idle = False
    if cfg.l2 > 0.0:
        if penalty is None:
            penalty = support_penalty_weights(cfg.l2, cfg.l2_metric, stats)
        bg = add_support_penalty(add_support_penalty(bg, state.w, penalty), anchor.y, -penalty)
        moved_idle = decay_idle_coordinates(state.w, cfg.gamma, cfg.l2, cfg.l2_metric, penalty)
    correction = bg.sums + bg.counts * anchor.scaled_full_grad[indices]
    divisor = cfg.batch if cfg.rule is SvrgRule.MINIBATCH else bg.counts
    state.w[indices] -= cfg.gamma * correction / divisor
    state.iteration += 1
    state.samples_seen += cfg.batch
    values = state.w if moved_idle else state.w[indices]
    if not np.all(np.isfinite(values)):
        logger.warning("divergence at inner iteration %d", state.iteration)
        raise DivergenceError(state.iteration)
    return state


def svrg_train(data: Dataset, cfg: SvrgConfig, loss: LossKind, stats: FeatureStats | None = None,
               schedule: EvalSchedule | None = None, w0: np.ndarray | None = None) -> RunMetrics:
    """Outer epochs with y_{s+1} = (1/m) sum_n w_{s,n}; one checkpoint per anchor.

    Sample counts include the full pass over the data made for every anchor.
    """
    if len(data) == 0:
        raise EmptyDatasetError("cannot train on an empty dataset")
    loss = LossKind(loss)
    stats = resolve_stats(data, stats)
    evaluator = Evaluator(loss, data, schedule, cfg.l2, cfg.l2_metric, stats)
    penalty = support_penalty_weights(cfg.l2, cfg.l2_metric, stats) if cfg.l2 > 0.0 else None
    state = TrainState.start(data.dim, cfg.seed, w0)
    y = state.w.copy()
    metrics = RunMetrics(method=f"svrg-{cfg.rule.value}", config=Snapshot.of(cfg))
    clock = Stopwatch()
    n = len(data)
    samples = 0

    def observe():
        with clock.evaluating():
            metrics.record(evaluator.checkpoint(samples, clock.train, y))

    observe()
    try:
        for epoch in range(cfg.outer_epochs):
            with clock.training():
                anchor = build_anchor(data, loss, y, stats, cfg.l2, cfg.l2_metric)
                state.w = y.copy()
                total = np.zeros_like(y)
                for _ in range(cfg.m):
                    svrg_step(state, Batch.of(data, draw_indices(state, n, cfg.batch)), anchor, cfg, loss, stats,
                              penalty)
                    total += state.w
                y = total / cfg.m
                samples += n + cfg.m * cfg.batch
            observe()
            logger.debug("epoch %d: objective %.6g", epoch, metrics.final.objective)
    except DivergenceError as exc:
        metrics.samples, metrics.train_seconds, metrics.eval_seconds = samples, clock.train, clock.evaluation
        exc.metrics = metrics
        raise
    metrics.samples = samples
    metrics.train_seconds = clock.train
    metrics.eval_seconds = clock.evaluation
    metrics.weights = y
    return metrics


def _require_mu(consts: CurvatureConstants, stats: FeatureStats):
    if consts.mu <= 0.0 or stats.pmin <= 0.0:
        raise ConfigError("SVRG schedules need mu > 0 and pmin > 0; set l2 or a logistic lower bound")


def _ceil_epoch(raw: float) -> int:
    if raw < 1.0:
        logger.warning("epoch length %.3g < 1 before rounding up", raw)
    return max(1, math.ceil(raw))


def schedule_minibatch(consts: CurvatureConstants, stats: FeatureStats, B: int) -> tuple[float, int]:
    """gamma = 1/L and m = ceil(2 B L / ((pmin mu)(0.9 B - 4)))."""
    if B <= 4:
        raise PreconditionError("0.9 B - 4 > 0 requires B >= 5")
    _require_mu(consts, stats)
    raw = 2.0 * B * consts.L / ((stats.pmin * consts.mu) * (0.9 * B - 4.0))
    return 1.0 / consts.L, _ceil_epoch(raw)


def schedule_adabatch(consts: CurvatureConstants, stats: FeatureStats, B: int,
                      exact: bool = False) -> tuple[float, int]:
    """gamma = 1/(10 L) and m = ceil(20 L / (B pmin mu)).

    ``exact`` replaces B pmin by 1 - (1 - pmin)^B, which it approximates when B pmin << 1.
    """
    _require_mu(consts, stats)
    if exact:
        active_mass = pplus(stats.pmin, B)
    else:
        active_mass = B * stats.pmin
        if active_mass > 0.1:
            logger.warning("B pmin = %.3g is not small; 1 - (1 - pmin)^B differs from B pmin", active_mass)
    return 1.0 / (10.0 * consts.L), _ceil_epoch(20.0 * consts.L / (active_mass * consts.mu))


def svrg_rate(consts: CurvatureConstants, stats: FeatureStats, gamma: float, m: int, B: int,
              rule: SvrgRule | str) -> float:
    """Per-epoch contraction factor alpha of E[F(y_s) - F_*].

    The mini-batch rule uses pmin mu as its strong-convexity constant, like ``schedule_minibatch``.
    """
    rule = SvrgRule(rule)
    if gamma <= 0.0:
        raise PreconditionError("gamma > 0")
    if rule is SvrgRule.MINIBATCH:
        slack = 1.0 - gamma * consts.L * (3.0 + B) / (2.0 * B)
        if slack <= 0.0:
            raise PreconditionError("gamma L (3 + B) / (2 B) < 1")
        mu = stats.pmin * consts.mu
        return 1.0 / (mu * gamma * slack * m) + 2.0 * consts.L * gamma / (B * slack)
    slack = 1.0 - 2.0 * gamma * consts.L
    if slack <= 0.0:
        raise PreconditionError("2 gamma L < 1")
    return (1.0 / (consts.mu * pplus(stats.pmin, B) * gamma * slack * m)
            + 2.0 * consts.L * gamma / slack)


@dataclass(frozen=True, eq=False)
class ReferenceOptimum:
    f_star: float
    w: np.ndarray


def _penalty_diagonal(dim: int, l2: float, l2_metric: L2Metric, stats: FeatureStats | None) -> np.ndarray:
    if l2_metric is L2Metric.IDENTITY:
        return np.full(dim, l2)
    if stats is None:
        raise ConfigError("the diag-p l2 metric needs feature statistics")
    return l2 * stats.p


@redis_cache('data.fingerprint', 'loss', 'l2', 'l2_metric', 'stats.fingerprint')
def _reference_optimum(data: Dataset, loss: LossKind, l2: float, l2_metric: L2Metric,
                       stats: FeatureStats | None) -> ReferenceOptimum:
    n, X = len(data), data.matrix
    if loss is LossKind.SQUARED:
        system = (X.T @ X) / n + sp.diags(_penalty_diagonal(data.dim, l2, l2_metric, stats))
        rhs = np.asarray(X.T @ data.labels).ravel() / n
        if data.dim <= DENSE_SOLVE_MAX_DIM:
            w = scipy.linalg.lstsq(system.toarray(), rhs)[0]
        else:
            w, info = cg(system.tocsr(), rhs, rtol=1e-12, maxiter=10 * data.dim)
            if info:
                logger.warning("conjugate gradient stopped before convergence (info=%d)", info)
    else:
        result = scipy.optimize.minimize(
            lambda w: full_objective(loss, data, w, l2, l2_metric, stats), np.zeros(data.dim),
            jac=lambda w: full_gradient(data, loss, w, l2, l2_metric, stats),
            method='L-BFGS-B', options={'gtol': 1e-12, 'ftol': 1e-15, 'maxiter': 10000})
        w = result.x
    return ReferenceOptimum(full_objective(loss, data, w, l2, l2_metric, stats), w)


def reference_optimum(data: Dataset, loss: LossKind, l2: float = 0.0, l2_metric: L2Metric = L2Metric.IDENTITY,
                      stats: FeatureStats | None = None) -> ReferenceOptimum:
    """F_* and its minimiser: normal equations for squared loss, L-BFGS for logistic.

    Cached by the data and stats fingerprints.
    """
    if len(data) == 0:
        raise EmptyDatasetError("reference optimum of an empty dataset")
    return _reference_optimum(data, LossKind(loss), float(l2), L2Metric(l2_metric), stats or data.stats)
