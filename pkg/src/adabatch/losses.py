"""Linear-prediction losses phi(x.w), objectives and sparse curvature constants."""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .exceptions import ConfigError, EmptyDatasetError
from .sparse_core import Dataset, Example, FeatureStats, SparseVector

logger = logging.getLogger(__name__)


class LossKind(str, Enum):
    LOGISTIC = 'logistic'
    SQUARED = 'squared'


class L2Metric(str, Enum):
    IDENTITY = 'identity'
    DIAG_P = 'diag-p'


def loss_value(kind: LossKind, margin, label):
    """phi evaluated at the prediction ``margin`` = x.w."""
    if LossKind(kind) is LossKind.SQUARED:
        return 0.5 * (margin - label) ** 2
    return np.logaddexp(0.0, -label * margin)


def loss_derivative(kind: LossKind, margin, label):
    """phi'; the gradient of f is this scalar times the feature vector."""
    if LossKind(kind) is LossKind.SQUARED:
        return margin - label
    return -label * expit(-label * margin)


def loss_second_derivative(kind: LossKind, margin, label):
    if LossKind(kind) is LossKind.SQUARED:
        return np.ones_like(np.asarray(margin, dtype=np.float64))
    s = expit(label * margin)
    return s * (1.0 - s)


def example_gradient(kind: LossKind, example: Example, w: np.ndarray) -> SparseVector:
    scalar = float(loss_derivative(kind, example.features.dot(w), example.label))
    return example.features.scaled(scalar)


def batch_derivatives(kind: LossKind, rows: sp.csr_matrix, labels: np.ndarray, w: np.ndarray) -> np.ndarray:
    """phi' for every row of a CSR batch at weights ``w``."""
    return loss_derivative(kind, rows @ w, labels)


def _penalty_weights(l2_metric: L2Metric, stats: FeatureStats | None, dim: int) -> np.ndarray | float:
    if L2Metric(l2_metric) is L2Metric.IDENTITY:
        return 1.0
    if stats is None:
        raise ConfigError("the diag-p l2 metric needs feature statistics")
    if stats.dim != dim:
        raise ConfigError(f"stats of dim {stats.dim} for weights of dim {dim}")
    return stats.p


def l2_penalty(w: np.ndarray, l2: float, l2_metric: L2Metric = L2Metric.IDENTITY,
               stats: FeatureStats | None = None) -> float:
    """(l2 / 2) ||w||^2 under the chosen metric."""
    if l2 == 0.0:
        return 0.0
    return 0.5 * l2 * float(np.sum(_penalty_weights(l2_metric, stats, w.size) * w * w))


def l2_gradient(w: np.ndarray, l2: float, l2_metric: L2Metric = L2Metric.IDENTITY,
                stats: FeatureStats | None = None) -> np.ndarray:
    """Dense gradient of the penalty: l2 * w or l2 * p * w."""
    if l2 == 0.0:
        return np.zeros_like(w)
    return l2 * _penalty_weights(l2_metric, stats, w.size) * w


def support_penalty_weights(l2: float, l2_metric: L2Metric, stats: FeatureStats | None) -> np.ndarray:
    """Factor each example applies to w(k) on its own support, so that f'(k) += weights(k) w(k).

    Averaged over examples the extra term is p(k) weights(k) w(k), the penalty gradient, with
    weights = l2 under diag-p and l2 / p under the identity metric. NaN where p(k) = 0.
    """
    if stats is None:
        raise ConfigError("a penalty carried by the examples needs feature statistics")
    weights = np.full(stats.dim, np.nan)
    active = stats.active
    if L2Metric(l2_metric) is L2Metric.DIAG_P:
        weights[active] = l2
    else:
        weights[active] = l2 / stats.p[active]
    return weights


def _require_examples(data: Dataset):
    if len(data) == 0:
        raise EmptyDatasetError("objective of an empty dataset")


def full_objective(kind: LossKind, data: Dataset, w: np.ndarray, l2: float = 0.0,
                   l2_metric: L2Metric = L2Metric.IDENTITY, stats: FeatureStats | None = None) -> float:
    """(1/N) sum phi(x_i.w, y_i) + (l2/2) ||w||^2."""
    if l2 < 0.0:
        raise ConfigError("l2 must be non-negative")
    _require_examples(data)
    losses = loss_value(kind, data.matrix @ w, data.labels)
    return float(np.mean(losses)) + l2_penalty(w, l2, l2_metric, stats or data.stats)


def data_gradient(kind: LossKind, data: Dataset, w: np.ndarray) -> np.ndarray:
    """Exact average gradient of the data term."""
    _require_examples(data)
    derivatives = batch_derivatives(kind, data.matrix, data.labels, w)
    return np.asarray(data.matrix.T @ derivatives).ravel() / len(data)


def prediction_error(kind: LossKind, data: Dataset, w: np.ndarray) -> float:
    """0/1 misclassification rate for logistic (ties are errors), mean squared error otherwise."""
    _require_examples(data)
    margins = data.matrix @ w
    if LossKind(kind) is LossKind.LOGISTIC:
        return float(np.mean(data.labels * margins <= 0.0))
    return float(np.mean((margins - data.labels) ** 2))


def prediction_loss(kind: LossKind, data: Dataset, w: np.ndarray) -> float:
    """Average loss without penalty."""
    _require_examples(data)
    return float(np.mean(loss_value(kind, data.matrix @ w, data.labels)))


@dataclass(frozen=True)
class CurvatureConstants:
    m: float
    M: float
    G2: float
    mu: float
    L: float
    R2: float

    def __post_init__(self):
        values = (self.m, self.M, self.G2, self.mu, self.L, self.R2)
        if not all(np.isfinite(values)):
            raise ConfigError(f"non-finite curvature constants {values}")
        if not 0.0 <= self.m <= self.M:
            raise ConfigError(f"need 0 <= m <= M, got m={self.m}, M={self.M}")
        if self.mu > self.L:
            raise ConfigError(f"need mu <= L, got mu={self.mu}, L={self.L}")


def curvature_constants(kind: LossKind, data: Dataset, stats: FeatureStats, l2: float = 0.0,
                        l2_metric: L2Metric = L2Metric.IDENTITY, logistic_m: float = 0.0) -> CurvatureConstants:
    """Sparse linear-prediction constants mu = m(1 - pmax), L = M(1 + sum p), R2 = G2 M.

    A diag-p penalty adds ``l2`` to both mu and L; an identity penalty adds ``l2`` to mu
    and ``l2 / pmin`` to L.
    """
    if LossKind(kind) is LossKind.SQUARED:
        m, M = 1.0, 1.0
    else:
        m, M = logistic_m, 0.25
    if len(data):
        G2 = float(np.max(np.asarray(data.matrix.multiply(data.matrix).sum(axis=1)).ravel()))
    else:
        G2 = 0.0
    mu = m * (1.0 - stats.pmax)
    L = M * (1.0 + float(np.sum(stats.p)))
    if l2 > 0.0:
        mu += l2
        L += l2 if L2Metric(l2_metric) is L2Metric.DIAG_P else l2 / stats.pmin
    return CurvatureConstants(m=m, M=M, G2=G2, mu=mu, L=L, R2=G2 * M)
