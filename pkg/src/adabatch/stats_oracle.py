"""Exact and Monte Carlo checks of the moments of the sparse average operator.

For N i.i.d. draws Z_1..Z_N of a discrete law with p = P(Z != 0), the operator is
A = 0 when every draw is zero and otherwise the mean of the nonzero draws. AdaBatch applies
it per coordinate, which is why its expected update is the reconditioned gradient.
"""
import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .aggregation import cbp_scale, pplus
from .cache import memoize_args
from .exceptions import ConfigError, EnumerationTooLarge, PreconditionError
from .losses import LossKind, batch_derivatives, data_gradient
from .sparse_core import Dataset, FeatureStats, PLaw, estimate_feature_probabilities, gen_synthetic

logger = logging.getLogger(__name__)

ENUMERATION_LIMIT = 10 ** 7
RECURRENCE_MAX_N = 64
MIN_TRIALS = 10 ** 4


@dataclass(frozen=True)
class DiscreteLaw:
    """Finitely supported law given as (value, probability) atoms; the zero atom is listed explicitly."""
    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        atoms = tuple((float(v), float(q)) for v, q in self.atoms)
        object.__setattr__(self, 'atoms', atoms)
        if not atoms:
            raise ConfigError("a law needs at least one atom")
        probs = np.array([q for _, q in atoms])
        if np.any(probs < 0.0):
            raise ConfigError("atom probabilities must be non-negative")
        if abs(math.fsum(probs) - 1.0) > 1e-12:
            raise ConfigError(f"atom probabilities sum to {math.fsum(probs)!r}, not 1")

    @property
    def values(self) -> np.ndarray:
        return np.array([v for v, _ in self.atoms])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([q for _, q in self.atoms])

    @property
    def p(self) -> float:
        """P(Z != 0)."""
        return math.fsum(q for v, q in self.atoms if v != 0.0)

    @property
    def mean(self) -> float:
        return math.fsum(v * q for v, q in self.atoms)

    @property
    def second_moment(self) -> float:
        return math.fsum(v * v * q for v, q in self.atoms)


def _check(law: DiscreteLaw, N: int) -> float:
    if N < 1 or int(N) != N:
        raise ConfigError(f"N must be a positive integer, got {N}")
    p = law.p
    if p <= 0.0:
        raise ConfigError("the law has no nonzero atom (p = 0)")
    return min(p, 1.0)


@memoize_args
def binomial_weights(N: int, p: float) -> np.ndarray:
    """P(M = i) for i = 1..N, M ~ Binomial(N, p).

    Coefficients come from the multiplicative recurrence up to N = 64 and from log-gamma beyond.
    """
    i = np.arange(1, N + 1, dtype=np.float64)
    if p == 1.0:
        weights = np.zeros(N)
        weights[-1] = 1.0
    elif N <= RECURRENCE_MAX_N:
        coefficients = np.cumprod((N - i + 1.0) / i)
        weights = coefficients * p ** i * (1.0 - p) ** (N - i)
    else:
        log_coefficients = gammaln(N + 1.0) - gammaln(i + 1.0) - gammaln(N - i + 1.0)
        weights = np.exp(log_coefficients + i * math.log(p) + (N - i) * math.log1p(-p))
    weights.flags.writeable = False
    return weights


def inverse_weight_sum(N: int, p: float) -> float:
    """sum_i C(N, i) p^i (1-p)^(N-i) / i = E[1/M ; M > 0]."""
    return math.fsum(binomial_weights(N, p) / np.arange(1, N + 1))


def inverse_count_expectation(N: int, p: float) -> float:
    """E[1/M | M > 0] for M ~ Binomial(N, p)."""
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p must lie in (0, 1], got {p}")
    return inverse_weight_sum(N, p) / pplus(p, N)


def lemma1_mean(law: DiscreteLaw, N: int) -> float:
    """E[A] = (1 - (1-p)^N) / p * E[Z]."""
    p = _check(law, N)
    return cbp_scale(p, N) * law.mean


def lemma1_second_moment(law: DiscreteLaw, N: int) -> float:
    """E[A^2] = (1 - (1-p)^N) / p^2 * E[Z]^2 + S * (E[Z^2] / p - E[Z]^2 / p^2), S the inverse weight sum.

    Conditioning on M nonzero draws gives E[A^2 | M] = E[Z]^2 / p^2 + Var(Z+) / M, so the squared-mean
    part carries P(M > 0) = 1 - (1-p)^N once.
    """
    p = _check(law, N)
    mean, second = law.mean, law.second_moment
    return (pplus(p, N) * mean * mean / (p * p)
            + inverse_weight_sum(N, p) * (second / p - mean * mean / (p * p)))


def lemma1_second_moment_bound(law: DiscreteLaw, N: int) -> float:
    """((1 - (1-p)^N) / p)^2 E[Z]^2 + (1 - (1-p)^N) / p * E[Z^2]."""
    p = _check(law, N)
    factor = cbp_scale(p, N)
    return factor * factor * law.mean ** 2 + factor * law.second_moment


def lemma2_bound(law: DiscreteLaw, N: int) -> float:
    """5 (1 - (1-p)^N) E[Z^2] / (N p^2) + (1 - (1-p)^N) E[Z]^2 / p^2, valid once N p >= 5."""
    p = _check(law, N)
    if N * p < 5.0:
        raise PreconditionError(f"N p >= 5 (got N={N}, p={p:.6g})")
    reach = pplus(p, N)
    return 5.0 * reach * law.second_moment / (N * p * p) + reach * law.mean ** 2 / (p * p)


def brute_force_moments(law: DiscreteLaw, N: int) -> tuple[float, float]:
    """E[A] and E[A^2] by enumerating every outcome tuple."""
    _check(law, N)
    size = len(law.atoms) ** N
    if size > ENUMERATION_LIMIT:
        raise EnumerationTooLarge(f"{len(law.atoms)}^{N} outcomes exceed {ENUMERATION_LIMIT}")
    first, second = [], []
    for outcome in itertools.product(law.atoms, repeat=N):
        weight = math.prod(q for _, q in outcome)
        if weight == 0.0:
            continue
        nonzero = [v for v, _ in outcome if v != 0.0]
        value = math.fsum(nonzero) / len(nonzero) if nonzero else 0.0
        first.append(weight * value)
        second.append(weight * value * value)
    return math.fsum(first), math.fsum(second)


@dataclass(frozen=True, eq=False)
class MonteCarloEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    trials: int


def adabatch_expectation(data: Dataset, w: np.ndarray, B: int, loss: LossKind,
                         stats: FeatureStats | None = None) -> np.ndarray:
    """cbp_scale(p(k), B) * F'(w)(k), the expected AdaBatch merge at ``w``."""
    stats = stats or estimate_feature_probabilities(data)
    scale = np.zeros(data.dim)
    scale[stats.active] = cbp_scale(stats.p[stats.active], B)
    return scale * data_gradient(loss, data, w)


def monte_carlo_adabatch_expectation(data: Dataset, w: np.ndarray, B: int, loss: LossKind,
                                     stats: FeatureStats | None = None, trials: int = MIN_TRIALS,
                                     seed: int = 0, chunk: int = 4096) -> MonteCarloEstimate:
    """Per-coordinate mean and standard error of the AdaBatch merge over ``trials`` resampled batches.

    Batches are drawn i.i.d. from ``data``; chunk c uses the c-th child stream of ``seed``.
    """
    if trials < MIN_TRIALS:
        raise PreconditionError(f"trials >= {MIN_TRIALS} (got {trials})")
    matrix, labels, d = data.matrix, data.labels, data.dim
    derivatives = batch_derivatives(loss, matrix, labels, w)
    total, total_sq = np.zeros(d), np.zeros(d)
    chunk = max(1, min(chunk, 2 ** 22 // d))
    chunks = math.ceil(trials / chunk)
    for c, child in enumerate(np.random.SeedSequence(seed).spawn(chunks)):
        size = min(chunk, trials - c * chunk)
        picks = np.random.default_rng(child).integers(0, len(data), size=(size, B)).ravel()
        rows = matrix[picks]
        nnz = np.diff(rows.indptr)
        trial = np.repeat(np.repeat(np.arange(size), B), nnz)
        keys = trial * d + rows.indices
        sums = np.bincount(keys, weights=rows.data * np.repeat(derivatives[picks], nnz), minlength=size * d)
        counts = np.bincount(keys, minlength=size * d)
        merged = np.divide(sums, counts, out=np.zeros(size * d), where=counts > 0).reshape(size, d)
        total += merged.sum(axis=0)
        total_sq += (merged * merged).sum(axis=0)
    mean = total / trials
    variance = np.maximum(total_sq - trials * mean * mean, 0.0) / (trials - 1)
    return MonteCarloEstimate(mean, np.sqrt(variance / trials), trials)


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_deviation: float
    points: int
    detail: str = ''


@dataclass
class LemmaReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def rows(self) -> list[dict]:
        return [{'check': c.name, 'status': 'pass' if c.passed else 'FAIL', 'points': c.points,
                 'max_deviation': c.max_deviation, 'detail': c.detail} for c in self.checks]


def random_law(rng: np.random.Generator, atoms: int = 3) -> DiscreteLaw:
    """A zero atom plus ``atoms - 1`` nonzero values with Dirichlet probabilities."""
    probs = rng.dirichlet(np.ones(atoms))
    values = rng.normal(size=atoms - 1) * 2.0
    values[values == 0.0] = 1.0
    probs[-1] = 1.0 - math.fsum(probs[:-1])
    return DiscreteLaw(((0.0, probs[0]),) + tuple(zip(values, probs[1:])))


def _relative(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(b))


def check_exact_moments(laws: list[DiscreteLaw], n_max: int, tolerance: float = 1e-12) -> CheckResult:
    worst, points = 0.0, 0
    for law in laws:
        for N in range(1, n_max + 1):
            mean, second = brute_force_moments(law, N)
            worst = max(worst, _relative(lemma1_mean(law, N), mean), _relative(lemma1_second_moment(law, N), second))
            points += 1
    return CheckResult('exact moments vs enumeration', worst <= tolerance, worst, points)


def check_simple_bound(laws: list[DiscreteLaw], n_max: int) -> CheckResult:
    worst, points = 0.0, 0
    for law in laws:
        for N in range(1, n_max + 1):
            worst = max(worst, lemma1_second_moment(law, N) - lemma1_second_moment_bound(law, N))
            points += 1
    return CheckResult('simple bound >= exact second moment', worst <= 1e-12, worst, points,
                       'max of exact - bound')


def _np_grid(np_min: float, n_max: int = RECURRENCE_MAX_N):
    for p in np.round(np.arange(0.1, 1.0, 0.1), 10):
        for N in range(1, n_max + 1):
            if N * p >= np_min:
                yield int(N), float(p)


def check_lemma2_bound(laws: list[DiscreteLaw], np_min: float) -> CheckResult:
    worst, points = -math.inf, 0
    grid = list(_np_grid(max(np_min, 5.0)))
    for law in laws:
        for N, p in grid:
            # rescale the law to the grid's p, keeping the nonzero atoms' proportions
            nonzero = [(v, q / law.p * p) for v, q in law.atoms if v != 0.0]
            rescaled = DiscreteLaw(((0.0, 1.0 - math.fsum(q for _, q in nonzero)),) + tuple(nonzero))
            worst = max(worst, lemma1_second_moment(rescaled, N) - lemma2_bound(rescaled, N))
            points += 1
    return CheckResult('N p >= 5 bound >= exact second moment', worst <= 1e-12, worst, points,
                       'max of exact - bound')


def check_inverse_count(np_min: float) -> CheckResult:
    worst, points = -math.inf, 0
    for N, p in _np_grid(np_min):
        worst = max(worst, inverse_count_expectation(N, p) - 5.0 / (N * p))
        points += 1
    return CheckResult('E[1/M | M>0] <= 5/(Np)', worst <= 0.0, worst, points, 'max of E[1/M|M>0] - 5/(Np)')


def check_binomial_consistency(n_max: int = 2 * RECURRENCE_MAX_N) -> CheckResult:
    worst, points = 0.0, 0
    for N in range(1, n_max + 1):
        for p in (0.01, 0.1, 0.37, 0.5, 0.9, 1.0):
            worst = max(worst, abs(math.fsum(binomial_weights(N, p)) - pplus(p, N)))
            points += 1
    return CheckResult('binomial weights sum to 1-(1-p)^N', worst <= 1e-12, worst, points)


def check_reconditioned_expectation(trials: int, seed: int = 0, batches=(2, 10, 50), points: int = 3,
                                    bands: float = 4.0, coverage: float = 0.99) -> CheckResult:
    data, _ = gen_synthetic(20, 2000, PLaw(low=0.02, high=0.6), noise=0.1, seed=seed)
    stats = estimate_feature_probabilities(data)
    rng = np.random.default_rng(seed)
    inside = total = 0
    worst = 0.0
    for _ in range(points):
        w = 0.5 * rng.standard_normal(data.dim)
        for B in batches:
            estimate = monte_carlo_adabatch_expectation(data, w, B, LossKind.LOGISTIC, stats, trials,
                                                        seed=int(rng.integers(2 ** 31)))
            expected = adabatch_expectation(data, w, B, LossKind.LOGISTIC, stats)
            gap = np.abs(estimate.mean - expected)
            ok = gap <= bands * estimate.stderr
            inside += int(ok.sum())
            total += ok.size
            with np.errstate(divide='ignore', invalid='ignore'):
                z = np.where(estimate.stderr > 0, gap / estimate.stderr, 0.0)
            worst = max(worst, float(z.max()))
    share = inside / total
    return CheckResult('AdaBatch merge expectation (Monte Carlo)', share >= coverage, worst, total,
                       f'{share:.2%} within {bands:g} standard errors; deviation in standard errors')


def run_lemma_suite(seed: int = 0, laws: int = 100, n_max: int = 8, np_min: float = 5.0,
                    trials: int = 0) -> LemmaReport:
    """All oracle checks; the Monte Carlo check runs only when ``trials`` > 0."""
    rng = np.random.default_rng(seed)
    sample = [random_law(rng) for _ in range(laws)]
    report = LemmaReport()
    report.checks.append(check_exact_moments(sample, n_max))
    report.checks.append(check_simple_bound(sample, n_max))
    report.checks.append(check_lemma2_bound(sample[:10], np_min))
    report.checks.append(check_inverse_count(np_min))
    report.checks.append(check_binomial_consistency())
    if trials:
        report.checks.append(check_reconditioned_expectation(trials, seed))
    for check in report.checks:
        log = logger.info if check.passed else logger.error
        log("%s: %s over %d points, max deviation %.3g", check.name, 'pass' if check.passed else 'FAIL',
            check.points, check.max_deviation)
    return report
