"""Streaming moments, standard errors and deterministic parallel ensemble runs."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

import numpy as np


class Estimate(NamedTuple):
    """A Monte Carlo estimate with its standard error."""

    value: float
    se: float

    def __repr__(self) -> str:
        return f"{self.value:.6g} +- {self.se:.2g}"


def mean_se(samples: np.ndarray) -> Estimate:
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return Estimate(float("nan"), float("nan"))
    m = float(x.mean())
    if n == 1:
        return Estimate(m, float("nan"))
    return Estimate(m, float(x.std(ddof=1) / np.sqrt(n)))


def variance_se(samples: np.ndarray) -> Estimate:
    """Sample variance with a kurtosis-aware standard error."""
    x = np.asarray(samples, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        return Estimate(float("nan"), float("nan"))
    v = float(x.var(ddof=1))
    c = x - x.mean()
    m4 = float(np.mean(c ** 4))
    se = np.sqrt(max(m4 - (n - 3) / (n - 1) * v * v, 0.0) / n)
    return Estimate(v, float(se))


@dataclass
class MomentAccumulator:
    """Welford/Chan streaming count, mean and second central sum.

    Merging two accumulators matches accumulating the concatenated stream up
    to floating-point reassociation (see the merge-consistency tests for the
    documented tolerance).
    """

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, x: float) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def update_batch(self, xs: Iterable[float]) -> None:
        for x in np.asarray(xs, dtype=np.float64).ravel():
            self.update(float(x))

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return MomentAccumulator(self.count, self.mean, self.m2)
        if self.count == 0:
            return MomentAccumulator(other.count, other.mean, other.m2)
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / n
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / n
        return MomentAccumulator(n, mean, m2)

    @property
    def variance(self) -> float:
        return self.m2 / (self.count - 1) if self.count > 1 else float("nan")

    @property
    def std_error(self) -> float:
        return float(np.sqrt(self.variance / self.count)) if self.count > 1 else float("nan")

    def estimate(self) -> Estimate:
        return Estimate(self.mean, self.std_error)


# -- deterministic parallel map over replicates ------------------------------

_WORKER_FN = None
_WORKER_CTX = None


def _pool_init(fn, ctx):
    global _WORKER_FN, _WORKER_CTX
    _WORKER_FN = fn
    _WORKER_CTX = ctx


def _pool_call(idx):
    return idx, _WORKER_FN(idx, _WORKER_CTX)


def resolve_jobs(threads: int | None) -> int:
    if threads is None or threads <= 0:
        return max(1, os.cpu_count() or 1)
    return threads


def parallel_map(fn: Callable[[int, object], object], n: int, ctx: object = None,
                 n_jobs: int | None = None, chunksize: int | None = None) -> list:
    """Run fn(i, ctx) for i in range(n), returning results ordered by i.

    Results are reduced in index order regardless of worker scheduling, so
    downstream aggregation is bit-identical for every worker count.
    """
    jobs = resolve_jobs(n_jobs)
    if jobs <= 1 or n <= 1:
        return [fn(i, ctx) for i in range(n)]
    import multiprocessing as mp

    if chunksize is None:
        chunksize = max(1, n // (jobs * 8))
    out: list = [None] * n
    with mp.get_context("fork").Pool(jobs, initializer=_pool_init, initargs=(fn, ctx)) as pool:
        for idx, res in pool.imap_unordered(_pool_call, range(n), chunksize=chunksize):
            out[idx] = res
    return out
