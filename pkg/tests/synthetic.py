"""Synthetic evaluators and random checkpoints shared by the search tests."""
import math

import numpy as np

from qckpt.container import make_checkpoint
from qckpt.search import Evaluation, prior_compression


class AxisEvaluator:
    """Quality delta is a fixed function of the cube position; no quantization happens.

    ``qd = sum_a max(0, target_a - p_a) + slope * (n_max - sum(p))`` falls along
    every axis, so the cheapest feasible point under a threshold just above
    the target's own value is the target itself.
    """

    def __init__(self, cube, target, slope=0.001):
        self.cube = cube
        self.target = tuple(target)
        self.slope = slope
        self.calls = 0
        self.top = sum(n - 1 for n in cube.shape)

    def threshold(self):
        return self.slope * (self.top - sum(self.target)) + 1e-9

    def __call__(self, ckpt, scores, cfg):
        self.calls += 1
        p = self.cube.point(cfg)
        deficit = sum(max(0, a - b) for a, b in zip(self.target, p))
        return Evaluation(deficit + self.slope * (self.top - sum(p)), self.estimate(ckpt, scores, cfg))

    def estimate(self, ckpt, scores, cfg):
        p = self.cube.point(cfg)
        return math.exp(-(0.5 * p[0] + 0.3 * p[1] + 0.2 * p[2]))


class PriorEvaluator:
    """Monotone quality curve with the closed-form compression prior."""

    def __init__(self, scale=1.0):
        self.scale = scale
        self.calls = 0

    def __call__(self, ckpt, scores, cfg):
        self.calls += 1
        qd = self.scale * (1.0 / cfg.bins + 0.5 * cfg.prune_frac + 0.02 - cfg.protect_frac)
        return Evaluation(qd, prior_compression(cfg))


def tiny_checkpoint(n=100, seed=0):
    return make_checkpoint({"l.fc.weight": np.random.default_rng(seed).normal(size=n)})


def random_checkpoint(seed, n=20_000):
    """(checkpoint, gradients): 2 to 5 layers of normal, Laplace or t(4) weights at random scales."""
    rng = np.random.default_rng(seed)
    names = ["l0.attn.w", "l0.mlp.fc.w", "l0.conv.w", "l0.norm.w", "l0.fc.bias"]
    arrays, grads = {}, {}
    for name in names[:rng.integers(2, 6)]:
        size = int(rng.integers(n // 8, n // 3))
        kind = rng.integers(3)
        a = [rng.normal(0, 1, size), rng.laplace(0, 1, size), rng.standard_t(4, size)][kind] * rng.uniform(0.01, 1)
        arrays[name] = a
        grads[name] = rng.normal(0, 1, size) * np.abs(a) + rng.normal(0, 0.1, size)
    return make_checkpoint(arrays), make_checkpoint(grads)


def random_walk(cube, seed, n, start=(3, 3, 1), allow_all_down=True):
    """Lazy-free random walk on the cube with steps in {-1, 0, 1} per axis."""
    rng = np.random.default_rng(seed)
    p = tuple(start)
    out = [p]
    while len(out) < n:
        d = tuple(int(x) for x in rng.integers(-1, 2, 3))
        q = tuple(a + b for a, b in zip(p, d))
        if q == p or any(not 0 <= x < s for x, s in zip(q, cube.shape)):
            continue
        if not allow_all_down and all(x < 0 for x in d):
            continue
        p = q
        out.append(p)
    return out
