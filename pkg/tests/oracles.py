"""Independent reference implementations used to derive expected values.

Nothing here imports the package's algorithms; each oracle is the most
direct formulation available (sorting, dynamic programming, enumeration).
"""
import heapq
import itertools
import math

import numpy as np


def exact_quantile(values, q):
    """Nearest-rank quantile: the ``ceil(q*(n-1)) + 1``-th smallest value."""
    v = np.sort(np.asarray(values, dtype=np.float64).reshape(-1))
    return float(v[math.ceil(q * (v.size - 1))])


def _segment_costs(x, w, loss):
    """cost[i, j] = optimal one-center cost of sorted points i..j (inclusive)."""
    n = x.size
    cw = np.concatenate([[0.0], np.cumsum(w)])
    cwx = np.concatenate([[0.0], np.cumsum(w * x)])
    cost = np.full((n, n), np.inf)
    if loss == "l2":
        cwx2 = np.concatenate([[0.0], np.cumsum(w * x * x)])
        for i in range(n):
            j = np.arange(i, n)
            sw = cw[j + 1] - cw[i]
            sx = cwx[j + 1] - cwx[i]
            sx2 = cwx2[j + 1] - cwx2[i]
            cost[i, i:] = np.maximum(sx2 - sx * sx / np.where(sw > 0, sw, 1.0), 0.0)
    elif loss == "l1":
        for i in range(n):
            j = np.arange(i, n)
            # a weighted median minimizes the weighted absolute deviation
            half = (cw[j + 1] + cw[i]) / 2.0
            m = np.minimum(i + np.searchsorted(cw[i + 1:], half), j)
            left = x[m] * (cw[m + 1] - cw[i]) - (cwx[m + 1] - cwx[i])
            right = (cwx[j + 1] - cwx[m + 1]) - x[m] * (cw[j + 1] - cw[m + 1])
            cost[i, i:] = left + right
    else:
        raise ValueError(loss)
    return cost


def kmeans_1d_optimum(points, k, weights=None, loss="l2"):
    """Exact weighted 1-D k-means (``l2``) or k-median (``l1``) by dynamic programming.

    Returns the optimal loss divided by the total weight, i.e. the mean
    per-point loss the clustering bounds are stated in.
    """
    order = np.argsort(points, kind="stable")
    x = np.asarray(points, dtype=np.float64)[order]
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64)[order]
    n = x.size
    k = min(k, n)
    cost = _segment_costs(x, w, loss)
    best = cost[0].copy()  # best[j]: points 0..j with one cluster
    for _ in range(1, k):
        # last cluster starts at i >= 1; cost[i, j] is inf for i > j
        split = (best[:-1, None] + cost[1:, :]).min(axis=0) if n > 1 else best
        best = np.minimum(best, split)
    return float(best[-1] / w.sum())


def mean_sq_loss(points, centers, weights=None):
    x = np.asarray(points, dtype=np.float64)[:, None]
    d = np.min((x - np.asarray(centers, dtype=np.float64)[None, :]) ** 2, axis=1)
    w = np.ones(d.size) if weights is None else np.asarray(weights, dtype=np.float64)
    return float((w * d).sum() / w.sum())


def uniform_quantize(x, k):
    """Min-max uniform quantizer with ``k`` levels at the cell midpoints."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return x.copy()
    cell = np.minimum(((x - lo) / (hi - lo) * k).astype(np.int64), k - 1)
    return lo + (cell + 0.5) * (hi - lo) / k


def nearest_center_quantize(x, centers):
    c = np.sort(np.asarray(centers, dtype=np.float64))
    x = np.asarray(x, dtype=np.float64)
    d = np.abs(x[:, None] - c[None, :])
    return c[np.argmin(d, axis=1)]


def huffman_cost(counts):
    """Total coded bits of an optimal prefix code: the sum of all merge weights."""
    heap = [int(c) for c in counts if c > 0]
    if len(heap) == 1:
        return heap[0]
    heapq.heapify(heap)
    total = 0
    while len(heap) > 1:
        a = heapq.heappop(heap)
        b = heapq.heappop(heap)
        total += a + b
        heapq.heappush(heap, a + b)
    return total


def runs(values):
    """(value, length) pairs of maximal runs."""
    return [(int(v), len(list(g))) for v, g in itertools.groupby(np.asarray(values).tolist())]


def brute_force_optimum(configs, evaluate, threshold):
    """Evaluate every config; the feasible one with the highest compression (first wins ties)."""
    best = None
    for cfg in configs:
        qd, est = evaluate(cfg)
        if qd <= threshold and (best is None or est > best[1]):
            best = (cfg, est)
    return best
