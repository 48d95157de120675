"""Configuration search over the (bins x prune fraction x protect fraction) cube.

Axis positions are ordered so that a larger index is meant to raise quality:
more bins, less pruning, more protection.  Along the bins and protect axes
quality rises and compression falls reliably, so the most compressive
feasible configuration sits on the lower frontier of the feasible region.
Pruning does not behave that way under a reconstruction-error metric
(zeroing tiny weights acts like one more codebook level), so the prune
fraction is enumerated rather than bisected.
"""
from __future__ import annotations

import itertools
import math
import os
import re
import shlex
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from .container import Checkpoint, LayerType, write_checkpoint
from .errors import ExternalEvaluatorFailed, InvalidConfig
from .quantizer import (
    BINS_CHOICES,
    EMBED_BINS_CHOICES,
    PROTECT_CHOICES,
    Metric,
    QuantConfig,
    QuantizedCheckpoint,
    dequantize,
    quantize_checkpoint,
)
from .ranker import ScoreSet

PRUNE_AXIS = (0.5, 0.4, 0.3, 0.2, 0.1, 0.0)
METRIC_SWITCH_GAIN = 0.10

Point = tuple[int, int, int]


# ---------------------------------------------------------------------------
# the cube

@dataclass(frozen=True)
class ConfigCube:
    """Grid of candidate configurations; ``base`` supplies sigma and alpha."""

    bins: tuple[int, ...] = BINS_CHOICES
    prune: tuple[float, ...] = PRUNE_AXIS
    protect: tuple[float, ...] = PROTECT_CHOICES
    metrics: tuple[Metric, ...] = (Metric.MAGNITUDE, Metric.SENSITIVITY)
    embed_bins: tuple[int, ...] = EMBED_BINS_CHOICES
    base: QuantConfig = field(default_factory=QuantConfig)

    def __post_init__(self):
        if not (self.bins and self.prune and self.protect and self.metrics and self.embed_bins):
            raise InvalidConfig("every cube axis needs at least one value")
        if list(self.bins) != sorted(set(self.bins)):
            raise InvalidConfig("bins axis must be strictly ascending")
        if list(self.prune) != sorted(set(self.prune), reverse=True):
            raise InvalidConfig("prune axis must be strictly descending")
        if list(self.protect) != sorted(set(self.protect)):
            raise InvalidConfig("protect axis must be strictly ascending")

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.bins), len(self.prune), len(self.protect)

    def points(self) -> Iterable[Point]:
        return itertools.product(*(range(n) for n in self.shape))

    def __len__(self):
        return int(np.prod(self.shape)) * len(self.metrics)

    def config(self, p: Point, metric: Metric, embed_bins: int | None = None) -> QuantConfig:
        return self.base.with_(
            bins=self.bins[p[0]],
            prune_frac=self.prune[p[1]],
            protect_frac=self.protect[p[2]],
            prune_metric=metric,
            embed_bins=max(self.embed_bins) if embed_bins is None else embed_bins,
        )

    def point(self, cfg: QuantConfig) -> Point:
        try:
            return self.bins.index(cfg.bins), self.prune.index(cfg.prune_frac), self.protect.index(cfg.protect_frac)
        except ValueError:
            raise InvalidConfig(f"{cfg} is not in the cube") from None

    def contains(self, cfg: QuantConfig) -> bool:
        try:
            self.point(cfg)
        except InvalidConfig:
            return False
        return cfg.prune_metric in self.metrics and cfg.embed_bins in self.embed_bins

    def for_scores(self, scores: ScoreSet) -> "ConfigCube":
        """Drop the sensitivity metric when no gradient history is available."""
        if scores.has_sensitivity or Metric.SENSITIVITY not in self.metrics:
            return self
        return ConfigCube(self.bins, self.prune, self.protect, (Metric.MAGNITUDE,), self.embed_bins, self.base)

    def configs(self) -> list[QuantConfig]:
        return [self.config(p, m) for m in self.metrics for p in self.points()]


def prior_compression(cfg: QuantConfig) -> float:
    """Closed-form compression guess used only to order candidates.

    Counts log2 of the alphabet per quantized value, nothing for pruned
    values beyond their share of the alphabet, and 16 bits per protected
    value.  Strictly decreasing along every cube axis.
    """
    bits = (1.0 - cfg.prune_frac - cfg.protect_frac) * math.log2(cfg.bins + 2) + 16.0 * cfg.protect_frac
    bits += cfg.prune_frac * 1.0
    return 32.0 / bits


# ---------------------------------------------------------------------------
# evaluators

@dataclass(frozen=True)
class Evaluation:
    quality_delta: float
    est_compression: float


def index_entropy_bytes(q: QuantizedCheckpoint) -> float:
    """Shannon bound on the level indices, with one distribution per layer type."""
    total = 0.0
    by_type: dict[LayerType, list[np.ndarray]] = {}
    for t in q:
        by_type.setdefault(t.layer_type, []).append(t.indices)
    for idx in by_type.values():
        counts = np.bincount(np.concatenate(idx)).astype(np.float64)
        counts = counts[counts > 0]
        n = counts.sum()
        total += float(-(counts * np.log2(counts / n)).sum()) / 8.0
    return total


def estimate_compression(q: QuantizedCheckpoint) -> float:
    """raw bytes / (index entropy + codebooks + protected bfloat16 values)."""
    codebook = sum(4 * cb.size for cb in q.codebooks.values())
    protected = sum(2 * t.protected_values.size for t in q)
    return q.raw_bytes / max(index_entropy_bytes(q) + codebook + protected, 1.0)


def proxy_quality_delta(ckpt: Checkpoint, restored: Checkpoint) -> float:
    """Parameter-count-weighted relative L2 error per layer type."""
    total = ckpt.num_params
    out = 0.0
    deq = {t.name: t.data for t in restored}
    for tensors in ckpt.by_layer_type().values():
        w = np.concatenate([t.data for t in tensors]).astype(np.float64)
        r = np.concatenate([deq[t.name] for t in tensors]).astype(np.float64)
        norm = float(np.linalg.norm(w))
        err = float(np.linalg.norm(w - r))
        rel = err / norm if norm > 0 else (0.0 if err == 0 else math.inf)
        out += w.size / total * rel
    return out


class Evaluator(Protocol):
    def __call__(self, ckpt: Checkpoint, scores: ScoreSet, cfg: QuantConfig) -> Evaluation: ...


@dataclass(frozen=True)
class ProxyEvaluator:
    """Deterministic stand-in for a model metric: relative reconstruction error."""

    seed: int = 0

    def __call__(self, ckpt, scores, cfg) -> Evaluation:
        q = quantize_checkpoint(ckpt, scores, cfg, seed=self.seed)
        return Evaluation(proxy_quality_delta(ckpt, dequantize(q)), estimate_compression(q))

    def estimate(self, ckpt, scores, cfg) -> float:
        return estimate_compression(quantize_checkpoint(ckpt, scores, cfg, seed=self.seed))


_NUMBER = re.compile(r"^[-+]?(\d+(\.\d*)?|\.\d+)([eE][-+]?\d+)?$")


@dataclass(frozen=True)
class ExternalEvaluator:
    """Runs ``command`` with ``{ckpt}`` replaced by a dequantized DQT1 file.

    The command must exit 0 and print a single decimal number (the quality
    degradation) on stdout.
    """

    command: str
    seed: int = 0
    timeout: float | None = None

    def __post_init__(self):
        if "{ckpt}" not in self.command:
            raise InvalidConfig("evaluator command needs a {ckpt} placeholder")

    def __call__(self, ckpt, scores, cfg) -> Evaluation:
        q = quantize_checkpoint(ckpt, scores, cfg, seed=self.seed)
        fd, path = tempfile.mkstemp(suffix=".dqt")
        os.close(fd)
        try:
            write_checkpoint(dequantize(q), path)
            argv = [tok.replace("{ckpt}", path) for tok in shlex.split(self.command)]
            try:
                proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise ExternalEvaluatorFailed(f"could not run {argv[0]!r}: {exc}") from None
        finally:
            os.unlink(path)
        if proc.returncode != 0:
            raise ExternalEvaluatorFailed(f"evaluator exited with status {proc.returncode}: {proc.stderr.strip()}")
        text = proc.stdout.strip()
        if not _NUMBER.match(text) or not math.isfinite(float(text)):
            raise ExternalEvaluatorFailed(f"evaluator printed {text!r}, expected one decimal number")
        return Evaluation(float(text), estimate_compression(q))

    def estimate(self, ckpt, scores, cfg) -> float:
        return estimate_compression(quantize_checkpoint(ckpt, scores, cfg, seed=self.seed))


def evaluate_config(ckpt: Checkpoint, scores: ScoreSet, cfg: QuantConfig,
                    ev: Evaluator | None = None) -> tuple[float, float]:
    e = (ev or ProxyEvaluator())(ckpt, scores, cfg)
    return e.quality_delta, e.est_compression


# ---------------------------------------------------------------------------
# search bookkeeping

@dataclass(frozen=True)
class SearchOutcome:
    config: QuantConfig | None
    quality_delta: float
    est_compression: float
    evaluations_used: int

    @property
    def feasible(self) -> bool:
        return self.config is not None

    @property
    def status(self) -> str:
        return "OK" if self.feasible else "INFEASIBLE"


def canonical(cfg: QuantConfig, has_embedding: bool = True) -> QuantConfig:
    """Collapse configurations that quantize identically."""
    if cfg.prune_frac == 0 and cfg.prune_metric != Metric.MAGNITUDE:
        cfg = cfg.with_(prune_metric=Metric.MAGNITUDE)
    if not has_embedding and cfg.embed_bins != max(EMBED_BINS_CHOICES):
        cfg = cfg.with_(embed_bins=max(EMBED_BINS_CHOICES))
    return cfg


class _Trials:
    """Memoized, batched evaluation; counts distinct configurations evaluated."""

    def __init__(self, ckpt, scores, ev: Evaluator, threshold: float, m: int):
        if m < 1:
            raise ValueError("parallelism must be at least 1")
        self.ckpt, self.scores, self.ev = ckpt, scores, ev
        self.threshold = threshold
        self.m = m
        self.has_embedding = any(t.layer_type == LayerType.EMBEDDING for t in ckpt)
        self.results: dict[QuantConfig, Evaluation] = {}

    def key(self, cfg: QuantConfig) -> QuantConfig:
        return canonical(cfg, self.has_embedding)

    def run(self, cfgs: Sequence[QuantConfig]) -> list[Evaluation]:
        todo = list(dict.fromkeys(self.key(c) for c in cfgs if self.key(c) not in self.results))
        if todo:
            if self.m > 1 and len(todo) > 1:
                with ThreadPoolExecutor(min(self.m, len(todo))) as ex:
                    evals = list(ex.map(lambda c: self.ev(self.ckpt, self.scores, c), todo))
            else:
                evals = [self.ev(self.ckpt, self.scores, c) for c in todo]
            self.results.update(zip(todo, evals))
        return [self.results[self.key(c)] for c in cfgs]

    def estimates(self, cfgs: Sequence[QuantConfig]) -> list[float]:
        """Compression estimates without a quality evaluation (not counted as evaluations)."""
        est = getattr(self.ev, "estimate", None)
        out = []
        for c in cfgs:
            k = self.key(c)
            if k in self.results:
                out.append(self.results[k].est_compression)
            elif est is not None:
                out.append(float(est(self.ckpt, self.scores, k)))
            else:
                out.append(prior_compression(k))
        return out

    def get(self, cfg: QuantConfig) -> Evaluation:
        return self.run([cfg])[0]

    def feasible(self, cfg: QuantConfig) -> bool:
        return self.get(cfg).quality_delta <= self.threshold

    @property
    def used(self) -> int:
        return len(self.results)

    def best(self, cfgs: Iterable[QuantConfig]) -> QuantConfig | None:
        """Highest-compression feasible config among already evaluated ``cfgs`` (first wins ties)."""
        best = None
        for c in cfgs:
            e = self.results.get(self.key(c))
            if e is None or e.quality_delta > self.threshold:
                continue
            if best is None or e.est_compression > self.results[self.key(best)].est_compression:
                best = c
        return best

    def outcome(self, cfg: QuantConfig | None) -> SearchOutcome:
        if cfg is None:
            return SearchOutcome(None, math.nan, math.nan, self.used)
        e = self.get(cfg)
        return SearchOutcome(self.key(cfg), e.quality_delta, e.est_compression, self.used)


# ---------------------------------------------------------------------------
# guided exhaustive search

def _diagonal(lo: Point, hi: Point) -> list[Point]:
    span = [h - l for l, h in zip(lo, hi)]
    n = max(span)
    if n == 0:
        return [lo]
    return [tuple(l + (t * s + n // 2) // n for l, s in zip(lo, span)) for t in range(n + 1)]


def _first_feasible(trials: _Trials, cfgs: list[QuantConfig]) -> int | None:
    """m-ary search for the first feasible entry of a quality-ordered list."""
    lo, hi = -1, len(cfgs)  # cfgs[lo] infeasible (or none), cfgs[hi] feasible (or none)
    while hi - lo > 1:
        inner = hi - lo - 1
        k = min(trials.m, inner)
        probes = sorted({lo + 1 + (inner * (i + 1)) // (k + 1) for i in range(k)})
        res = trials.run([cfgs[i] for i in probes])
        for i, e in zip(probes, res):
            if e.quality_delta <= trials.threshold:
                hi = i
                break
            lo = i
    return hi if hi < len(cfgs) else None


def _leq(a, b) -> bool:
    return all(x <= y for x, y in zip(a, b))


def _search_slice(cube: ConfigCube, trials: _Trials, metric: Metric, prune_idx: int, embed: int,
                  incumbent: list[QuantConfig]) -> None:
    """Divide and conquer over (bins, protect) with the prune fraction fixed.

    Appends feasible frontier configurations to ``incumbent``; boxes whose
    most aggressive corner is already known to compress no better than the
    incumbent are skipped.
    """
    infeasible: list[tuple[int, int]] = []
    feasible: list[tuple[int, int]] = []

    def cfg(q):
        return cube.config((q[0], prune_idx, q[1]), metric, embed)

    def best_est():
        b = trials.best(incumbent)
        return -math.inf if b is None else trials.get(b).est_compression

    def visit(lo, hi):
        if lo[0] > hi[0] or lo[1] > hi[1]:
            return
        if any(_leq(hi, q) for q in infeasible) or any(_leq(q, lo) for q in feasible):
            return
        # the corner bounds the box's compression; probe it once an incumbent exists
        if incumbent:
            corner = trials.get(cfg(lo))
            if corner.est_compression <= best_est():
                return
        diag = _diagonal(lo, hi)
        cfgs = [cfg(q) for q in diag]
        f = _first_feasible(trials, cfgs)
        for q, c in zip(diag, cfgs):
            e = trials.results.get(trials.key(c))
            if e is not None and e.quality_delta > trials.threshold:
                infeasible.append(q)
        if f is None:
            return
        p = diag[f]
        feasible.append(p)
        incumbent.append(cfgs[f])
        visit(lo, (p[0] - 1, hi[1]))
        visit((p[0], lo[1]), (hi[0], p[1] - 1))

    n = cube.shape
    visit((0, 0), (n[0] - 1, n[2] - 1))


def guided_exhaustive_search(cube: ConfigCube, ckpt: Checkpoint, scores: ScoreSet, ev: Evaluator,
                             threshold: float, m: int = 1, trials: _Trials | None = None) -> SearchOutcome:
    """Most compressive feasible configuration, evaluating a fraction of the cube.

    Quality and compression move monotonically along the bins and protect
    axes, so each (metric, prune fraction) slice is searched by divide and
    conquer: find the first feasible point ``p`` on the box diagonal, drop
    the dominated box above ``p`` and recurse into ``{x_1 < p_1}`` and
    ``{x_1 >= p_1, x_2 < p_2}``.  Boxes already known to be infeasible or
    outperformed are skipped.  Pruning has no such monotone effect on a
    reconstruction-error proxy, so every prune fraction is visited, most
    aggressive first.  Finally the smaller embedding codebook is tried on the
    winner.
    """
    cube = cube.for_scores(scores)
    trials = trials or _Trials(ckpt, scores, ev, threshold, m)
    embed = max(cube.embed_bins)
    found: list[QuantConfig] = []
    slices = [(mt, j) for j in range(len(cube.prune)) for mt in cube.metrics
              if not (cube.prune[j] == 0 and mt != cube.metrics[0])]
    for metric, j in slices:
        _search_slice(cube, trials, metric, j, embed, found)
    best = trials.best(found)
    if best is not None and trials.has_embedding:
        alts = [best.with_(embed_bins=b) for b in sorted(cube.embed_bins) if b != best.embed_bins]
        trials.run(alts[:1])
        best = trials.best(alts[:1] + [best])
    return trials.outcome(best)


def full_grid_search(cube: ConfigCube, ckpt: Checkpoint, scores: ScoreSet, ev: Evaluator,
                     threshold: float, m: int = 1) -> SearchOutcome:
    """Evaluate every configuration of the cube (reference for the guided search)."""
    cube = cube.for_scores(scores)
    trials = _Trials(ckpt, scores, ev, threshold, m)
    cfgs = [cube.config(p, met, e) for met in cube.metrics for p in cube.points() for e in
            (sorted(cube.embed_bins, reverse=True) if trials.has_embedding else [max(cube.embed_bins)])]
    trials.run(cfgs)
    return trials.outcome(trials.best(cfgs))


# ---------------------------------------------------------------------------
# delta-neighbourhood search

def neighborhood(cube: ConfigCube, prev: QuantConfig, e: int) -> list[QuantConfig]:
    """Configs within Chebyshev distance ``e`` of ``prev`` (same metric), except
    those more aggressive than ``prev`` on every axis."""
    p = cube.point(prev)
    n = cube.shape
    out = []
    ranges = [range(max(0, p[a] - e), min(n[a] - 1, p[a] + e) + 1) for a in range(3)]
    for q in itertools.product(*ranges):
        if q == p or all(q[a] < p[a] for a in range(3)):
            continue
        out.append(cube.config(q, prev.prune_metric, prev.embed_bins))
    return out


def delta_neighborhood_search(cube: ConfigCube, prev: QuantConfig, e: int, ckpt: Checkpoint,
                              scores: ScoreSet, ev: Evaluator, threshold: float,
                              m: int = 1) -> SearchOutcome:
    """Search near the previous checkpoint's configuration, falling back to the guided search.

    ``prev`` is evaluated together with its flipped prune metric, and the
    flip is kept only if it lowers the quality delta by more than 10%.
    Candidates (``prev`` plus its neighbourhood) are then evaluated in
    batches of ``m`` in decreasing order of estimated compression, and the
    first batch containing a feasible configuration ends the search.
    """
    if e < 0:
        raise ValueError("neighbourhood radius must be non-negative")
    cube = cube.for_scores(scores)
    if not cube.contains(prev):
        raise InvalidConfig(f"{prev} is not in the cube")
    trials = _Trials(ckpt, scores, ev, threshold, m)

    flips = [prev.with_(prune_metric=mt) for mt in cube.metrics if mt != prev.prune_metric]
    flips = flips if prev.prune_frac > 0 else []
    first = trials.run([prev] + flips)
    for f, res in zip(flips, first[1:]):
        if res.quality_delta < (1.0 - METRIC_SWITCH_GAIN) * first[0].quality_delta:
            prev = f
            break

    cands = [prev] + neighborhood(cube, prev, e)
    est = trials.estimates(cands)
    order = sorted(range(len(cands)), key=lambda i: (-est[i], i))
    cands = [cands[i] for i in order]
    for i in range(0, len(cands), m):
        batch = cands[i:i + m]
        trials.run(batch)
        winner = trials.best(batch)
        if winner is not None:
            return trials.outcome(winner)
    return guided_exhaustive_search(cube, ckpt, scores, ev, threshold, m, trials)
