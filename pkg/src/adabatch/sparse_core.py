"""Sparse vectors, datasets, libsvm ingestion and synthetic data."""
import hashlib
import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, TextIO

import numpy as np
import scipy.sparse as sp

from .exceptions import ConfigError, EmptyDatasetError, ParseError

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SparseVector:
    """Index/value pairs of a d-dimensional vector; stored support is the mathematical support."""
    indices: np.ndarray
    values: np.ndarray
    dim: int

    def __post_init__(self):
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indices.shape != values.shape or indices.ndim != 1:
            raise ValueError("indices and values must be 1-d arrays of the same length")
        if indices.size:
            if indices[0] < 0 or indices[-1] >= self.dim:
                raise ValueError(f"indices out of range [0, {self.dim})")
            if np.any(np.diff(indices) <= 0):
                raise ValueError("indices must be strictly increasing")
            if np.any(values == 0.0):
                raise ValueError("zero values are not stored")
        object.__setattr__(self, 'indices', indices)
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]], dim: int) -> 'SparseVector':
        """Build from ``(index, value)`` pairs, dropping zero values."""
        kept = [(int(k), float(v)) for k, v in pairs if v != 0.0]
        if not kept:
            return cls.empty(dim)
        indices, values = zip(*kept)
        return cls(np.array(indices), np.array(values), dim)

    @classmethod
    def empty(cls, dim: int) -> 'SparseVector':
        return cls(np.empty(0, dtype=np.int64), np.empty(0), dim)

    @classmethod
    def from_dense(cls, dense: np.ndarray) -> 'SparseVector':
        dense = np.asarray(dense, dtype=np.float64)
        support = np.flatnonzero(dense)
        return cls(support, dense[support], dense.size)

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.indices.tolist(), self.values.tolist()))

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def get(self, k: int) -> float:
        pos = np.searchsorted(self.indices, k)
        if pos < self.indices.size and self.indices[pos] == k:
            return float(self.values[pos])
        return 0.0

    def dot(self, w: np.ndarray) -> float:
        return float(self.values @ w[self.indices])

    def norm(self) -> float:
        return float(np.sqrt(self.values @ self.values))

    def scaled(self, factor: float) -> 'SparseVector':
        if factor == 0.0:
            return SparseVector.empty(self.dim)
        return SparseVector(self.indices, self.values * factor, self.dim)

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.dim)
        dense[self.indices] = self.values
        return dense

    def __eq__(self, other):
        if not isinstance(other, SparseVector):
            return NotImplemented
        return (self.dim == other.dim and np.array_equal(self.indices, other.indices)
                and np.array_equal(self.values, other.values))

    def __repr__(self):
        return f"SparseVector(dim={self.dim}, entries={self.entries})"


@dataclass(frozen=True)
class Example:
    features: SparseVector
    label: float


@dataclass(eq=False)
class FeatureStats:
    """Per-coordinate activity probabilities p(k) = P(k in Supp(f))."""
    p: np.ndarray
    pmin: float
    pmax: float

    @classmethod
    def from_probabilities(cls, p: np.ndarray) -> 'FeatureStats':
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0.0) or np.any(p > 1.0):
            raise ConfigError("probabilities must lie in [0, 1]")
        active = p[p > 0.0]
        pmin = float(active.min()) if active.size else 0.0
        pmax = float(p.max()) if p.size else 0.0
        return cls(p, pmin, pmax)

    @property
    def dim(self) -> int:
        return int(self.p.size)

    @property
    def active(self) -> np.ndarray:
        """Mask of coordinates with p(k) > 0."""
        return self.p > 0.0

    @cached_property
    def fingerprint(self) -> str:
        return hashlib.sha1(np.ascontiguousarray(self.p, dtype=np.float64).tobytes()).hexdigest()


@dataclass(eq=False)
class Dataset:
    examples: list[Example]
    dim: int
    stats: FeatureStats | None = None
    # generating probabilities, set for synthetic data only
    target_p: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.examples and self.dim < 1:
            raise ConfigError("dim must be >= 1")
        for example in self.examples:
            if example.features.dim != self.dim:
                raise ConfigError(f"example of dim {example.features.dim} in a dataset of dim {self.dim}")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    @cached_property
    def matrix(self) -> sp.csr_matrix:
        """Rows of the dataset as a CSR matrix of shape (n, d)."""
        n = len(self.examples)
        if n == 0:
            return sp.csr_matrix((0, self.dim))
        nnz = np.fromiter((e.features.nnz for e in self.examples), dtype=np.int64, count=n)
        indptr = np.concatenate(([0], np.cumsum(nnz)))
        indices = np.concatenate([e.features.indices for e in self.examples])
        values = np.concatenate([e.features.values for e in self.examples])
        return sp.csr_matrix((values, indices, indptr), shape=(n, self.dim))

    @cached_property
    def labels(self) -> np.ndarray:
        return np.fromiter((e.label for e in self.examples), dtype=np.float64, count=len(self.examples))

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1(str(self.dim).encode())
        matrix = self.matrix
        for array in (self.labels, matrix.indptr.astype(np.int64), matrix.indices.astype(np.int64), matrix.data):
            digest.update(np.ascontiguousarray(array).tobytes())
        return digest.hexdigest()

    def subset(self, rows: Iterable[int]) -> 'Dataset':
        return Dataset([self.examples[i] for i in rows], self.dim, self.stats, self.target_p)

    def with_stats(self, stats: FeatureStats) -> 'Dataset':
        return Dataset(self.examples, self.dim, stats, self.target_p)


def _parse_number(token: str, line_number: int, what: str) -> float:
    try:
        value = float(token)
    except ValueError as exc:
        raise ParseError(line_number, f"bad {what} {token!r}") from exc
    if not math.isfinite(value):
        raise ParseError(line_number, f"non-finite {what} {token!r}")
    return value


def parse_libsvm(stream: TextIO | Iterable[str], expected_dim: int | None = None) -> Dataset:
    """Read ``label idx:val ...`` lines (1-based indices) into a Dataset."""
    rows = []
    max_index = 0
    for line_number, line in enumerate(stream, start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        label = _parse_number(tokens[0], line_number, 'label')
        pairs = []
        previous = 0
        for token in tokens[1:]:
            idx, sep, raw = token.partition(':')
            if not sep or not (idx.isascii() and idx.isdigit()):
                raise ParseError(line_number, f"malformed feature {token!r}")
            index = int(idx)
            if index < 1:
                raise ParseError(line_number, f"indices are 1-based, got {index}")
            if index <= previous:
                raise ParseError(line_number, f"non-increasing index {index} after {previous}")
            previous = index
            pairs.append((index - 1, _parse_number(raw, line_number, 'value')))
        max_index = max(max_index, previous)
        rows.append((label, pairs))
    dim = max(max_index, expected_dim or 0)
    examples = [Example(SparseVector.from_pairs(pairs, dim), label) for label, pairs in rows]
    logger.info("parsed %d examples of dimension %d", len(examples), dim)
    return Dataset(examples, dim)


def _format_number(value: float) -> str:
    if value.is_integer() and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


def serialize_libsvm(data: Dataset, stream: TextIO) -> None:
    """Write the dataset as libsvm text, 1-based indices."""
    for example in data:
        features = ' '.join(f"{k + 1}:{_format_number(v)}" for k, v in example.features.entries)
        stream.write(f"{_format_number(float(example.label))} {features}".rstrip() + '\n')


def estimate_feature_probabilities(data: Dataset) -> FeatureStats:
    """Exact empirical frequency of each coordinate in the example supports."""
    if len(data) == 0:
        raise EmptyDatasetError("cannot estimate feature probabilities of an empty dataset")
    counts = np.bincount(data.matrix.indices, minlength=data.dim)
    return FeatureStats.from_probabilities(counts / len(data))


def normalize_rows(data: Dataset) -> Dataset:
    """Scale every example to unit Euclidean norm; zero rows pass through."""
    examples = []
    for example in data:
        norm = example.features.norm()
        if norm == 0.0:
            examples.append(example)
        else:
            features = SparseVector(example.features.indices, example.features.values / norm, data.dim)
            examples.append(Example(features, example.label))
    return Dataset(examples, data.dim, data.stats, data.target_p)


def train_test_split(data: Dataset, fraction: float = 0.8, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Seeded shuffle then a fixed-fraction split."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"split fraction must lie in (0, 1], got {fraction}")
    order = np.random.default_rng(seed).permutation(len(data))
    cut = int(round(fraction * len(data)))
    train = Dataset([data.examples[i] for i in order[:cut]], data.dim, target_p=data.target_p)
    test = Dataset([data.examples[i] for i in order[cut:]], data.dim, target_p=data.target_p)
    return train, test


@dataclass(frozen=True)
class PLaw:
    """Law of the per-coordinate activity probabilities of synthetic data.

    ``uniform``: p(k) ~ U[low, high]. ``power``: p(k) = high * (k+1)^-exponent clipped to [low, 1].
    """
    kind: str = 'uniform'
    low: float = 0.001
    high: float = 0.5
    exponent: float = 1.0

    def __post_init__(self):
        if self.kind not in ('uniform', 'power'):
            raise ConfigError(f"unknown p-law {self.kind!r}")
        if not 0.0 < self.low <= self.high <= 1.0:
            raise ConfigError(f"p-law needs 0 < low <= high <= 1, got [{self.low}, {self.high}]")
        if self.kind == 'power' and self.exponent <= 0.0:
            raise ConfigError("power-law exponent must be positive")

    def probabilities(self, d: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == 'uniform':
            return rng.uniform(self.low, self.high, size=d)
        return np.clip(self.high * np.arange(1, d + 1, dtype=np.float64) ** -self.exponent, self.low, 1.0)


def gen_synthetic(d: int, n: int, p_law: PLaw = PLaw(), noise: float = 0.0, seed: int = 0,
                  task: str = 'logistic', chunk: int = 4096) -> tuple[Dataset, np.ndarray]:
    """Independent Bernoulli(p(k)) binary features with labels from a planted weight vector.

    For ``squared`` the label is ``x.w* + noise * N(0, 1)``; for ``logistic`` it is
    ``sign(x.w*)`` flipped with probability ``noise``.
    """
    if d < 1 or n < 1:
        raise ConfigError("d and n must be >= 1")
    if task not in ('logistic', 'squared'):
        raise ConfigError(f"unknown task {task!r}")
    if task == 'logistic' and not 0.0 <= noise <= 0.5:
        raise ConfigError("logistic label noise is a flip probability in [0, 0.5]")
    rng = np.random.default_rng(seed)
    p = p_law.probabilities(d, rng)
    w_star = rng.standard_normal(d)
    examples = []
    for start in range(0, n, chunk):
        rows = rng.random((min(chunk, n - start), d)) < p
        margins = rows @ w_star
        if task == 'squared':
            labels = margins + noise * rng.standard_normal(margins.size) if noise else margins
        else:
            labels = np.where(margins >= 0.0, 1.0, -1.0)
            if noise:
                labels = np.where(rng.random(margins.size) < noise, -labels, labels)
        for row, label in zip(rows, labels):
            support = np.flatnonzero(row)
            examples.append(Example(SparseVector(support, np.ones(support.size), d), float(label)))
    data = Dataset(examples, d, target_p=p)
    return data.with_stats(estimate_feature_probabilities(data)), w_star
