"""Run metrics: checkpoint series, CSV/JSON emission and throughput tables."""
import csv
import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .base import Snapshot

logger = logging.getLogger(__name__)

CSV_COLUMNS = ('samples', 'seconds', 'objective', 'test_error')


@dataclass(frozen=True)
class Checkpoint:
    samples: int
    seconds: float
    objective: float
    test_error: float | None = None
    test_loss: float | None = None
    gap: float | None = None


@dataclass(eq=False)
class RunMetrics:
    method: str
    config: Snapshot = field(default_factory=Snapshot)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    sigma2: float | None = None
    train_seconds: float = 0.0
    eval_seconds: float = 0.0
    samples: int = 0
    weights: np.ndarray | None = field(default=None, repr=False)

    def record(self, checkpoint: Checkpoint) -> None:
        if self.checkpoints:
            last = self.checkpoints[-1]
            if checkpoint.samples < last.samples or checkpoint.seconds < last.seconds:
                raise ValueError("checkpoints must be ordered by samples and wall-clock")
        logger.debug("%s: %d samples, objective %.6g", self.method, checkpoint.samples, checkpoint.objective)
        self.checkpoints.append(checkpoint)

    @property
    def final(self) -> Checkpoint | None:
        return self.checkpoints[-1] if self.checkpoints else None

    @property
    def samples_per_second(self) -> float:
        return self.samples / self.train_seconds if self.train_seconds > 0 else math.inf

    def time_to_target(self, target: float) -> float | None:
        """Training wall-clock of the first checkpoint whose test error is at most ``target``."""
        for checkpoint in self.checkpoints:
            if checkpoint.test_error is not None and checkpoint.test_error <= target:
                return checkpoint.seconds
        return None

    def to_csv(self, stream: TextIO) -> None:
        writer = csv.writer(stream, lineterminator='\n')
        writer.writerow(CSV_COLUMNS)
        for checkpoint in self.checkpoints:
            writer.writerow([checkpoint.samples, repr(checkpoint.seconds), repr(checkpoint.objective),
                             '' if checkpoint.test_error is None else repr(checkpoint.test_error)])

    def to_json(self) -> dict:
        return {
            'method': self.method,
            'config': dict(self.config),
            'sigma2': self.sigma2,
            'samples': self.samples,
            'train_seconds': self.train_seconds,
            'eval_seconds': self.eval_seconds,
            'samples_per_second': None if math.isinf(self.samples_per_second) else self.samples_per_second,
            'checkpoints': [asdict(c) for c in self.checkpoints],
        }

    def dump_json(self, stream: TextIO) -> None:
        json.dump(self.to_json(), stream, indent=2, sort_keys=True, default=str)


def read_metrics_csv(stream: TextIO) -> list[Checkpoint]:
    """Read back a CSV written by :meth:`RunMetrics.to_csv`."""
    reader = csv.DictReader(stream)
    if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [Checkpoint(samples=int(row['samples']), seconds=float(row['seconds']),
                       objective=float(row['objective']),
                       test_error=float(row['test_error']) if row['test_error'] else None)
            for row in reader]


class Stopwatch:
    """Accumulates training and evaluation wall-clock separately."""

    def __init__(self):
        self.train = 0.0
        self.evaluation = 0.0

    @contextmanager
    def training(self):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.train += time.perf_counter() - start

    @contextmanager
    def evaluating(self):
        start = time.perf_counter()
        try:
            yield
        finally:
            self.evaluation += time.perf_counter() - start


def geometric_checkpoints(batch: int, budget: int, growth: float = 2.0) -> list[int]:
    """0, B, 2B, 4B, ... up to the budget, plus the final sample count (multiples of B)."""
    iterations = budget // batch
    points = [0]
    step = 1.0
    while int(step) < iterations:
        points.append(int(step) * batch)
        step *= growth
    points.append(iterations * batch)
    return sorted(set(points))


def throughput_report(runs: Iterable[RunMetrics], target: float | None = None) -> list[dict]:
    """One row per run: method, workers, samples/sec and wall-clock to reach ``target`` test error."""
    rows = []
    for run in runs:
        reached = run.time_to_target(target) if target is not None else None
        rows.append({
            'method': run.method,
            'workers': run.config.get('workers', 1),
            'samples_per_sec': run.samples_per_second,
            'time_to_target': None if target is None else ('unreached' if reached is None else reached),
        })
    return rows


def write_table(rows: list[dict], stream: TextIO) -> None:
    if not rows:
        return
    writer = csv.DictWriter(stream, fieldnames=list(rows[0]), lineterminator='\n')
    writer.writeheader()
    writer.writerows(rows)
