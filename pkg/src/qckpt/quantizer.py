"""Prune / protect / quantize partitioning and sketch-histogram k-means codebooks.

Each layer type gets one codebook.  A quantized tensor stores a level index per
element: ``0..K-1`` for codebook entries, ``K`` for pruned elements (restored as
0.0) and ``K+1`` for protected elements, whose values are kept separately as
bfloat16 bit patterns in position order.
"""
from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import kernels
from .container import Checkpoint, LayerType, NamedTensor
from .errors import CorruptIndex, InvalidConfig, MissingScores, TooFewDistinctPoints
from .ranker import ScoreSet
from .sketch import ZERO_THRESHOLD, sketch_build, sketch_merge, sketch_histogram, sketch_quantile

# partition labels
QUANTIZE = 0
PRUNE = 1
PROTECT = 2

BINS_CHOICES = (4, 6, 8, 12, 16, 32)
EMBED_BINS_CHOICES = (16, 32)
PRUNE_CHOICES = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
PROTECT_CHOICES = (0.0005, 0.005, 0.01)

LLOYD_TOL = 1e-6
LLOYD_MAX_ITER = 100
N_INIT = 5


class Metric(enum.IntEnum):
    MAGNITUDE = 0
    SENSITIVITY = 1


@dataclass(frozen=True)
class QuantConfig:
    bins: int = 16
    embed_bins: int = 32
    prune_frac: float = 0.0
    protect_frac: float = 0.0005
    prune_metric: Metric = Metric.MAGNITUDE
    sigma: float = 0.2
    alpha: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "prune_metric", Metric(self.prune_metric))
        if self.bins < 1 or self.embed_bins < 1:
            raise InvalidConfig("bin counts must be positive")
        if not (0.0 <= self.prune_frac < 1.0 and 0.0 <= self.protect_frac < 1.0):
            raise InvalidConfig("prune and protect fractions must lie in [0, 1)")
        if self.prune_frac + self.protect_frac >= 1.0:
            raise InvalidConfig("prune_frac + protect_frac must be below 1")
        if not 0.0 <= self.sigma <= 1.0:
            raise InvalidConfig("sigma must lie in [0, 1]")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidConfig("alpha must lie in (0, 1)")

    def in_search_space(self) -> bool:
        return (
            self.bins in BINS_CHOICES
            and self.embed_bins in EMBED_BINS_CHOICES
            and self.prune_frac in PRUNE_CHOICES
            and self.protect_frac in PROTECT_CHOICES
        )

    def bins_for(self, layer_type: LayerType) -> int:
        return self.embed_bins if layer_type == LayerType.EMBEDDING else self.bins

    def with_(self, **changes) -> "QuantConfig":
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# bfloat16 storage

def to_bfloat16(values) -> np.ndarray:
    """Round float32 values to bfloat16 bit patterns (round to nearest, ties to even)."""
    u = np.ascontiguousarray(values, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def from_bfloat16(bits) -> np.ndarray:
    return (np.asarray(bits, dtype=np.uint32) << 16).view(np.float32)


# ---------------------------------------------------------------------------
# partitioning

def _prune_scores(scores: ScoreSet, metric: Metric) -> Mapping[str, np.ndarray]:
    if metric == Metric.SENSITIVITY:
        if scores.sensitivity is None:
            raise MissingScores("sensitivity pruning requested but no gradients were supplied")
        return scores.sensitivity
    return scores.magnitude


def _group_sketch(arrays: Sequence[np.ndarray], alpha: float):
    sk = None
    for a in arrays:
        part = sketch_build(a, alpha)
        sk = part if sk is None else sketch_merge(sk, part)
    return sk


def _below(s: np.ndarray, threshold: float) -> np.ndarray:
    if threshold == 0.0:
        # quantile landed in the zero bucket: every near-zero score ties with it
        return s < ZERO_THRESHOLD
    return s < threshold


def partition_params(ckpt: Checkpoint, scores: ScoreSet, cfg: QuantConfig) -> dict[str, np.ndarray]:
    """Label every element QUANTIZE, PRUNE or PROTECT, with thresholds per layer type."""
    prune_src = _prune_scores(scores, cfg.prune_metric) if cfg.prune_frac > 0 else None
    for t in ckpt:
        for src in (scores.magnitude, prune_src, scores.sensitivity):
            if src is not None and (t.name not in src or src[t.name].size != t.size):
                raise MissingScores(f"scores do not cover tensor {t.name!r}")

    masks = {}
    for layer_type, tensors in ckpt.by_layer_type().items():
        names = [t.name for t in tensors]
        prune = {n: np.zeros(ckpt[n].size, dtype=bool) for n in names}
        protect = {n: np.zeros(ckpt[n].size, dtype=bool) for n in names}

        if prune_src is not None and layer_type != LayerType.EMBEDDING:
            sk = _group_sketch([prune_src[n] for n in names], cfg.alpha)
            threshold = sketch_quantile(sk, cfg.prune_frac)
            for n in names:
                prune[n] = _below(prune_src[n], threshold)

        if cfg.protect_frac > 0:
            q = 1.0 - cfg.protect_frac / 2.0
            for src in (scores.magnitude, scores.sensitivity):
                if src is None:
                    continue
                sk = _group_sketch([src[n] for n in names], cfg.alpha)
                threshold = sketch_quantile(sk, q)
                for n in names:
                    protect[n] |= src[n] > threshold

        for n in names:
            m = np.full(ckpt[n].size, QUANTIZE, dtype=np.uint8)
            m[prune[n]] = PRUNE
            m[protect[n]] = PROTECT
            masks[n] = m
    return masks


# ---------------------------------------------------------------------------
# clustering

def _sample(rng: np.random.Generator, weights: np.ndarray) -> int:
    cw = np.cumsum(weights)
    return int(np.searchsorted(cw, rng.random() * cw[-1], side="right"))


def weighted_kmeanspp_init(points, weights, k: int, seed=0) -> np.ndarray:
    """k-means++ seeding where every draw is proportional to weight (times squared distance)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if p.shape != w.shape:
        raise ValueError("points and weights differ in length")
    if k < 1:
        raise ValueError("k must be positive")
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be non-negative with a positive sum")
    if np.unique(p[w > 0]).size < k:
        raise TooFewDistinctPoints(f"fewer than {k} distinct positively weighted points")
    rng = np.random.default_rng(seed)
    chosen = [_sample(rng, w)]
    d2 = (p - p[chosen[0]]) ** 2
    for _ in range(1, k):
        prob = d2 * w
        if not prob.sum() > 0:
            raise TooFewDistinctPoints("ran out of points with positive sampling mass")
        idx = _sample(rng, prob)
        chosen.append(idx)
        np.minimum(d2, (p - p[idx]) ** 2, out=d2)
    return np.sort(p[chosen])


def weighted_loss(points, weights, centers) -> float:
    c = np.sort(np.asarray(centers, dtype=np.float64))
    return kernels.lloyd_step(points, weights, c)[2]


def weighted_lloyd(points, weights, centers, tol: float = LLOYD_TOL, max_iter: int = LLOYD_MAX_ITER,
                   return_n_iter: bool = False):
    """Weighted 1-D Lloyd iterations from ``centers``; returns ascending centers.

    Stops once the largest center move, relative to the largest center
    magnitude, drops below ``tol``.  A cluster left without weight is moved
    onto the point with the largest weighted squared distance.
    """
    p = np.ascontiguousarray(points, dtype=np.float64).reshape(-1)
    w = np.ascontiguousarray(weights, dtype=np.float64).reshape(-1)
    c = np.sort(np.asarray(centers, dtype=np.float64))
    n_iter = 0
    for _ in range(max_iter):
        sums, wsums, _, far = kernels.lloyd_step(p, w, c)
        n_iter += 1
        empty = wsums <= 0
        new = np.where(empty, c, sums / np.where(empty, 1.0, wsums))
        if empty.any():
            live = new[~empty]
            d2 = w * (p - live[kernels.assign_nearest(p, live)]) ** 2 if live.size else w.copy()
            for e in np.flatnonzero(empty):
                j = int(np.argmax(d2))
                if d2[j] <= 0:
                    break
                new[e] = p[j]
                np.minimum(d2, w * (p - p[j]) ** 2, out=d2)
        new = np.sort(new)
        scale = max(float(np.abs(c).max()), 1e-300)
        move = float(np.abs(new - c).max()) / scale
        c = new
        if move < tol:
            break
    return (c, n_iter) if return_n_iter else c


def histogram_weights(keys: np.ndarray, counts: np.ndarray, sigma: float) -> np.ndarray:
    """Blend normalized bucket frequency and normalized bucket magnitude."""
    cn = counts / counts.max()
    mag = np.abs(keys)
    top = mag.max()
    xn = mag / top if top > 0 else np.zeros_like(mag)
    return sigma * cn + (1.0 - sigma) * xn


def approx_kmeans(values, k: int, sigma: float = 0.2, alpha: float = 0.01, seed=0,
                  tol: float = LLOYD_TOL, max_iter: int = LLOYD_MAX_ITER, n_init: int = N_INIT,
                  return_init: bool = False):
    """Cluster the sketch histogram of ``values`` instead of the values themselves.

    Seeding is repeated ``n_init`` times and the run with the lowest weighted
    loss is kept.  With ``return_init`` the winning run's initial centers are
    returned as well.
    """
    if n_init < 1:
        raise ValueError("n_init must be positive")
    v = np.asarray(values).reshape(-1)
    if v.size == 0:
        out = np.empty(0, dtype=np.float64)
        return (out, out) if return_init else out
    hist = sketch_histogram(sketch_build(v, alpha))
    if len(hist) <= k:
        distinct = np.unique(v.astype(np.float64))
        out = distinct if distinct.size <= k else hist.keys
        return (out, out) if return_init else out
    w = histogram_weights(hist.keys, hist.counts.astype(np.float64), sigma)
    if np.count_nonzero(w) < k:
        w = np.maximum(w, 1e-12)
    best = None
    for child in np.random.SeedSequence(seed).spawn(n_init):
        init = weighted_kmeanspp_init(hist.keys, w, k, np.random.default_rng(child))
        centers = weighted_lloyd(hist.keys, w, init, tol, max_iter)
        loss = weighted_loss(hist.keys, w, centers)
        if best is None or loss < best[0]:
            best = (loss, centers, init)
    return (best[1], best[2]) if return_init else best[1]


# ---------------------------------------------------------------------------
# quantized checkpoints

@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    name: str
    shape: tuple[int, ...]
    layer_type: LayerType
    indices: np.ndarray
    protected_values: np.ndarray = field(default_factory=lambda: np.empty(0, np.uint16))

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "layer_type", LayerType(self.layer_type))
        object.__setattr__(self, "indices", np.ascontiguousarray(self.indices, dtype=np.uint16).reshape(-1))
        object.__setattr__(self, "protected_values", np.ascontiguousarray(self.protected_values, dtype=np.uint16))

    @property
    def size(self) -> int:
        return self.indices.size

    def __eq__(self, other):
        if not isinstance(other, QuantizedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.layer_type == other.layer_type
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.protected_values, other.protected_values)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class QuantizedCheckpoint:
    step: int
    config: QuantConfig
    codebooks: Mapping[LayerType, np.ndarray]
    tensors: tuple[QuantizedTensor, ...]

    def __post_init__(self):
        cbs = {LayerType(lt): np.ascontiguousarray(cb, dtype=np.float32) for lt, cb in self.codebooks.items()}
        object.__setattr__(self, "codebooks", dict(sorted(cbs.items())))
        object.__setattr__(self, "tensors", tuple(self.tensors))

    def __getitem__(self, name: str) -> QuantizedTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def levels(self, tensor: QuantizedTensor) -> int:
        """Codebook length K for the tensor's layer type (PRUNED = K, PROTECTED = K + 1)."""
        cb = self.codebooks.get(tensor.layer_type)
        return 0 if cb is None else cb.size

    def alphabet(self, tensor: QuantizedTensor) -> int:
        return self.levels(tensor) + 2

    def protected_positions(self, tensor: QuantizedTensor) -> np.ndarray:
        return np.flatnonzero(tensor.indices == self.levels(tensor) + 1)

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors)

    @property
    def raw_bytes(self) -> int:
        return 4 * self.num_params

    def __eq__(self, other):
        if not isinstance(other, QuantizedCheckpoint):
            return NotImplemented
        return (
            self.step == other.step
            and self.config == other.config
            and self.codebooks.keys() == other.codebooks.keys()
            and all(np.array_equal(self.codebooks[k].view(np.uint32), other.codebooks[k].view(np.uint32))
                    for k in self.codebooks)
            and self.tensors == other.tensors
        )

    __hash__ = None


def _fit_codebook(values: np.ndarray, k: int, cfg: QuantConfig, seed) -> np.ndarray:
    centers = approx_kmeans(values, k, cfg.sigma, cfg.alpha, seed)
    # float32 rounding may merge neighbouring centers
    return np.unique(centers.astype(np.float32))


def quantize_checkpoint(ckpt: Checkpoint, scores: ScoreSet, cfg: QuantConfig, seed: int = 0,
                        workers: int = 1) -> QuantizedCheckpoint:
    masks = partition_params(ckpt, scores, cfg)
    groups = ckpt.by_layer_type()

    def fit(layer_type):
        vals = np.concatenate([t.data[masks[t.name] == QUANTIZE] for t in groups[layer_type]])
        return layer_type, _fit_codebook(vals, cfg.bins_for(layer_type), cfg, [seed, int(layer_type)])

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            codebooks = dict(pool.map(fit, groups))
    else:
        codebooks = dict(map(fit, groups))

    tensors = []
    for t in ckpt:
        cb = codebooks[t.layer_type]
        K = cb.size
        m = masks[t.name]
        idx = np.empty(t.size, dtype=np.uint16)
        q = m == QUANTIZE
        if q.any():
            idx[q] = kernels.assign_nearest(t.data[q], cb)
        idx[m == PRUNE] = K
        prot = m == PROTECT
        idx[prot] = K + 1
        tensors.append(QuantizedTensor(t.name, t.shape, t.layer_type, idx, to_bfloat16(t.data[prot])))
    return QuantizedCheckpoint(ckpt.step, cfg, codebooks, tuple(tensors))


def dequantize(q: QuantizedCheckpoint) -> Checkpoint:
    out = []
    for t in q.tensors:
        cb = q.codebooks.get(t.layer_type, np.empty(0, np.float32))
        K = cb.size
        if t.size and int(t.indices.max()) >= K + 2:
            raise CorruptIndex(f"{t.name}: level index {int(t.indices.max())} outside alphabet of {K + 2}")
        table = np.concatenate([cb, np.zeros(2, dtype=np.float32)])
        data = table[t.indices]
        prot = np.flatnonzero(t.indices == K + 1)
        if prot.size != t.protected_values.size:
            raise CorruptIndex(
                f"{t.name}: {prot.size} protected positions but {t.protected_values.size} stored values"
            )
        data[prot] = from_bfloat16(t.protected_values)
        out.append(NamedTensor(t.name, t.shape, data, t.layer_type))
    return Checkpoint(tuple(out), step=q.step)
