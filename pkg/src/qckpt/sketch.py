"""Mergeable log-space quantile sketch.

A simplified DDSketch without bucket collapsing: a value ``x`` with
``|x| >= ZERO_THRESHOLD`` goes to bucket ``ceil(log_gamma |x|)`` on the side of
its sign, everything smaller is counted in a single zero bucket.  Bucket ``k``
covers ``(gamma**(k-1), gamma**k]`` and is represented by
``2 * gamma**k / (gamma + 1)``, which is within relative error ``alpha`` of every
value in the bucket.
"""
from __future__ import annotations

import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import reduce
from typing import Mapping

import numpy as np

from .errors import AlphaMismatch, AlphaOutOfRange, EmptySketch

ZERO_THRESHOLD = 1e-12
# values within this relative distance of a bucket's upper edge belong to it;
# keeps exact powers of gamma in their nominal bucket despite rounding in gamma
EDGE_RTOL = 1e-12


def gamma_for(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise AlphaOutOfRange(f"alpha must lie in (0, 1), got {alpha}")
    return (1.0 + alpha) / (1.0 - alpha)


def bucket_index(magnitudes: np.ndarray, gamma: float) -> np.ndarray:
    """Bucket index ``ceil(log_gamma m)`` for positive magnitudes, exact at bucket edges."""
    m = np.asarray(magnitudes, dtype=np.float64)
    k = np.ceil(np.log(m) / math.log(gamma))
    # log() rounding can put values at an edge one bucket off
    edge = 1.0 + EDGE_RTOL
    k -= np.power(gamma, k - 1.0) * edge >= m
    k += np.power(gamma, k) * edge < m
    return k.astype(np.int64)


def representative(index, gamma: float):
    """Value standing in for every magnitude in bucket ``index``."""
    return 2.0 * np.power(gamma, np.asarray(index, dtype=np.float64)) / (gamma + 1.0)


def bucket_bounds(index: int, gamma: float) -> tuple[float, float]:
    return gamma ** (index - 1), gamma ** index


def _count(indices: np.ndarray) -> dict[int, int]:
    if indices.size == 0:
        return {}
    lo = int(indices.min())
    counts = np.bincount(indices - lo)
    nz = np.flatnonzero(counts)
    return dict(zip((nz + lo).tolist(), counts[nz].tolist()))


@dataclass(frozen=True, eq=False)
class Histogram:
    keys: np.ndarray
    counts: np.ndarray

    def __len__(self):
        return len(self.keys)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class Sketch:
    alpha: float
    pos_buckets: Mapping[int, int] = field(default_factory=dict)
    neg_buckets: Mapping[int, int] = field(default_factory=dict)
    zero_count: int = 0

    def __post_init__(self):
        gamma_for(self.alpha)

    @property
    def gamma(self) -> float:
        return gamma_for(self.alpha)

    @property
    def total(self) -> int:
        return self.zero_count + sum(self.pos_buckets.values()) + sum(self.neg_buckets.values())

    @property
    def num_buckets(self) -> int:
        return len(self.pos_buckets) + len(self.neg_buckets) + (self.zero_count > 0)

    def _ordered(self) -> tuple[np.ndarray, np.ndarray]:
        """Representatives and counts in ascending value order."""
        g = self.gamma
        neg = np.array(sorted(self.neg_buckets.items(), reverse=True), dtype=np.int64).reshape(-1, 2)
        pos = np.array(sorted(self.pos_buckets.items()), dtype=np.int64).reshape(-1, 2)
        zero = np.array([[0, self.zero_count]], dtype=np.int64)[: 1 if self.zero_count else 0]
        keys = np.concatenate([-representative(neg[:, 0], g), np.zeros(zero.shape[0]), representative(pos[:, 0], g)])
        counts = np.concatenate([neg[:, 1], zero[:, 1], pos[:, 1]])
        return keys, counts

    def quantile(self, q: float) -> float:
        return sketch_quantile(self, q)

    def histogram(self) -> Histogram:
        return sketch_histogram(self)

    def merge(self, other: "Sketch") -> "Sketch":
        return sketch_merge(self, other)


def _build_serial(values: np.ndarray, alpha: float) -> Sketch:
    gamma = gamma_for(alpha)
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    mag = np.abs(v)
    big = mag >= ZERO_THRESHOLD
    zero_count = int(v.size - np.count_nonzero(big))
    pos = v > 0
    pos_idx = bucket_index(mag[big & pos], gamma)
    neg_idx = bucket_index(mag[big & ~pos], gamma)
    return Sketch(alpha, _count(pos_idx), _count(neg_idx), zero_count)


def sketch_build(values, alpha: float = 0.01, workers: int = 1, chunk: int = 1 << 20) -> Sketch:
    """Sketch ``values``; with ``workers > 1`` chunks are sketched concurrently and merged."""
    gamma_for(alpha)
    v = np.asarray(values).reshape(-1)
    if v.size and not np.isfinite(v).all():
        raise ValueError("sketch input must be finite")
    if workers <= 1 or v.size <= chunk:
        return _build_serial(v, alpha)
    parts = [v[i:i + chunk] for i in range(0, v.size, chunk)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        sketches = list(pool.map(lambda p: _build_serial(p, alpha), parts))
    return reduce(sketch_merge, sketches)


def sketch_merge(a: Sketch, b: Sketch) -> Sketch:
    if a.alpha != b.alpha:
        raise AlphaMismatch(f"cannot merge sketches with alpha {a.alpha} and {b.alpha}")
    pos = Counter(a.pos_buckets)
    pos.update(b.pos_buckets)
    neg = Counter(a.neg_buckets)
    neg.update(b.neg_buckets)
    return Sketch(a.alpha, dict(pos), dict(neg), a.zero_count + b.zero_count)


def sketch_quantile(s: Sketch, q: float) -> float:
    """Representative of the bucket holding nearest rank ``ceil(q*(n-1)) + 1``."""
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"quantile must lie in [0, 1], got {q}")
    n = s.total
    if n == 0:
        raise EmptySketch("quantile of an empty sketch")
    rank = math.ceil(q * (n - 1)) + 1
    keys, counts = s._ordered()
    return float(keys[np.searchsorted(np.cumsum(counts), rank)])


def sketch_histogram(s: Sketch) -> Histogram:
    keys, counts = s._ordered()
    return Histogram(keys, counts)


def exact_quantile(values, q: float) -> float:
    """Nearest-rank quantile on sorted data, using the same rank convention as the sketch."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    return float(v[math.ceil(q * (v.size - 1))])
