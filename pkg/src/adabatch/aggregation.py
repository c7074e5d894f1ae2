"""Batch-merge rules over an accumulated BatchGradient.

* mini-batch:    g(k) = sums(k) / B
* AdaBatch:      g(k) = sums(k) / counts(k)
* reconditioned: g(k) = scale(k) * sums(k) / B, with scale = (1 - (1 - p)^B) / p (cbp) or 1 / p (inv-p)
"""
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigError, StatsMismatchError
from .sparse_core import FeatureStats, SparseVector

logger = logging.getLogger(__name__)


class PreconditionerRule(str, Enum):
    NONE = 'none'
    CBP = 'cbp'
    INV_P = 'inv-p'


def _check_probabilities(p: np.ndarray, B: int):
    if B < 1 or int(B) != B:
        raise ConfigError(f"batch size must be a positive integer, got {B}")
    if np.any(p <= 0.0) or np.any(p > 1.0):
        raise ConfigError("probabilities must lie in (0, 1]")


def pplus(p, B: int):
    """1 - (1 - p)^B, the probability that a coordinate is active in at least one of B samples."""
    p = np.asarray(p, dtype=np.float64)
    _check_probabilities(p, B)
    with np.errstate(divide='ignore'):
        value = np.where(p == 1.0, 1.0, -np.expm1(B * np.log1p(-p)))
    return float(value) if value.ndim == 0 else value


def cbp_scale(p, B: int):
    """(1 - (1 - p)^B) / p computed as -expm1(B log1p(-p)) / p; exactly 1 for p = 1 or B = 1."""
    p = np.asarray(p, dtype=np.float64)
    _check_probabilities(p, B)
    if B == 1:
        value = np.ones_like(p)
    else:
        with np.errstate(divide='ignore', invalid='ignore'):
            value = np.where(p == 1.0, 1.0, -np.expm1(B * np.log1p(-p)) / p)
    return float(value) if value.ndim == 0 else value


@dataclass(frozen=True, eq=False)
class Preconditioner:
    """Dense diagonal scaling; NaN marks coordinates with p(k) = 0."""
    scale: np.ndarray
    rule: PreconditionerRule

    @classmethod
    def build(cls, stats: FeatureStats, B: int, rule: PreconditionerRule | str) -> 'Preconditioner':
        rule = PreconditionerRule(rule)
        if rule is PreconditionerRule.NONE:
            return cls(np.ones(stats.dim), rule)
        active = stats.active
        scale = np.full(stats.dim, np.nan)
        if rule is PreconditionerRule.CBP:
            scale[active] = cbp_scale(stats.p[active], B)
        else:
            scale[active] = 1.0 / stats.p[active]
        return cls(scale, rule)


@dataclass(frozen=True, eq=False)
class BatchGradient:
    """Per-coordinate partial sums and nonzero counts over a batch, aligned on sorted ``indices``."""
    dim: int
    batch_size: int
    indices: np.ndarray
    sums: np.ndarray
    counts: np.ndarray

    @classmethod
    def empty(cls, dim: int, batch_size: int) -> 'BatchGradient':
        if batch_size < 1:
            raise ConfigError("batch size must be >= 1")
        return cls(dim, batch_size, np.empty(0, dtype=np.int64), np.empty(0), np.empty(0, dtype=np.int64))

    @classmethod
    def from_rows(cls, rows: sp.csr_matrix, scalars: np.ndarray, batch_size: int | None = None) -> 'BatchGradient':
        """Batch of linear-prediction gradients ``scalars[b] * rows[b]``.

        Counts follow the feature support, so members with a zero derivative still count.
        """
        batch_size = rows.shape[0] if batch_size is None else batch_size
        if rows.nnz == 0:
            return cls.empty(rows.shape[1], batch_size)
        weights = rows.data * np.repeat(scalars, np.diff(rows.indptr))
        indices, inverse = np.unique(rows.indices, return_inverse=True)
        sums = np.bincount(inverse, weights=weights, minlength=indices.size)
        counts = np.bincount(inverse, minlength=indices.size)
        return cls(rows.shape[1], batch_size, indices.astype(np.int64), sums, counts)

    def count_of(self, k: int) -> int:
        pos = np.searchsorted(self.indices, k)
        return int(self.counts[pos]) if pos < self.indices.size and self.indices[pos] == k else 0

    def sum_of(self, k: int) -> float:
        pos = np.searchsorted(self.indices, k)
        return float(self.sums[pos]) if pos < self.indices.size and self.indices[pos] == k else 0.0


def accumulate(bg: BatchGradient, grad: SparseVector, support: np.ndarray | None = None) -> BatchGradient:
    """Add one member's gradient; ``support`` defaults to the stored entries of ``grad``."""
    if grad.dim != bg.dim:
        raise ConfigError(f"gradient of dim {grad.dim} added to a batch of dim {bg.dim}")
    support = grad.indices if support is None else np.asarray(support, dtype=np.int64)
    if support.size == 0:
        return bg
    indices = np.union1d(bg.indices, support)
    sums = np.zeros(indices.size)
    counts = np.zeros(indices.size, dtype=np.int64)
    old = np.searchsorted(indices, bg.indices)
    sums[old] = bg.sums
    counts[old] = bg.counts
    sums[np.searchsorted(indices, grad.indices)] += grad.values
    counts[np.searchsorted(indices, support)] += 1
    if counts.max() > bg.batch_size:
        raise ConfigError(f"more than {bg.batch_size} members accumulated")
    return BatchGradient(bg.dim, bg.batch_size, indices, sums, counts)


def add_support_penalty(bg: BatchGradient, w: np.ndarray, weights: np.ndarray) -> BatchGradient:
    """Every member also contributes ``weights(k) * w(k)`` on each coordinate of its support."""
    if bg.indices.size == 0:
        return bg
    factor = weights[bg.indices]
    missing = ~np.isfinite(factor)
    if np.any(missing):
        raise StatsMismatchError(int(bg.indices[np.argmax(missing)]))
    sums = bg.sums + bg.counts * factor * w[bg.indices]
    return BatchGradient(bg.dim, bg.batch_size, bg.indices, sums, bg.counts)


def _sparse(bg: BatchGradient, values: np.ndarray) -> SparseVector:
    keep = values != 0.0
    return SparseVector(bg.indices[keep], values[keep], bg.dim)


def merge_minibatch(bg: BatchGradient) -> SparseVector:
    return _sparse(bg, bg.sums / bg.batch_size)


def merge_adabatch(bg: BatchGradient) -> SparseVector:
    """Average over the members whose support contains the coordinate."""
    return _sparse(bg, bg.sums / bg.counts)


def merge_reconditioned(bg: BatchGradient, pre: Preconditioner) -> SparseVector:
    if pre.rule is PreconditionerRule.NONE:
        raise ConfigError("merge_reconditioned needs a cbp or inv-p preconditioner")
    scale = pre.scale[bg.indices]
    missing = ~np.isfinite(scale)
    if np.any(missing):
        raise StatsMismatchError(int(bg.indices[np.argmax(missing)]))
    return _sparse(bg, scale * bg.sums / bg.batch_size)
