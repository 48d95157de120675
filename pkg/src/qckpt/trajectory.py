"""Synthetic training trajectories.

Parameters follow a damped linear surrogate of gradient descent::

    g_t     = c * w_t + noise * rms(w_t) * xi_t
    w_{t+1} = w_t - lr0 * decay**t * g_t

so updates shrink geometrically and late checkpoints migrate between
quantization buckets less often, the regime delta coding is built for.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import Checkpoint, make_checkpoint, write_checkpoint


def default_layout(width: int = 64, depth: int = 2, vocab: int = 256, mlp_ratio: int = 4):
    """A small transformer-shaped layout (~1.1e5 parameters at the defaults)."""
    hidden = width * mlp_ratio
    layout = [("embed.weight", (vocab, width))]
    for i in range(depth):
        p = f"h.{i}"
        layout += [
            (f"{p}.ln_1.weight", (width,)),
            (f"{p}.ln_1.bias", (width,)),
            (f"{p}.attn.qkv.weight", (width, 3 * width)),
            (f"{p}.attn.qkv.bias", (3 * width,)),
            (f"{p}.attn.out.weight", (width, width)),
            (f"{p}.ln_2.weight", (width,)),
            (f"{p}.ln_2.bias", (width,)),
            (f"{p}.mlp.fc1.weight", (width, hidden)),
            (f"{p}.mlp.fc1.bias", (hidden,)),
            (f"{p}.mlp.fc2.weight", (hidden, width)),
            (f"{p}.mlp.fc2.bias", (width,)),
        ]
    layout += [("ln_f.weight", (width,)), ("head.weight", (width, vocab))]
    return tuple(layout)


@dataclass(frozen=True)
class TrajectorySpec:
    layout: tuple[tuple[str, tuple[int, ...]], ...] = field(default_factory=default_layout)
    steps: int = 50
    lr0: float = 0.05
    decay: float = 0.9
    noise: float = 0.5
    pull: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 2:
            raise ValueError("a trajectory needs at least 2 steps")
        if not 0.0 < self.decay <= 1.0:
            raise ValueError("decay must lie in (0, 1]")
        if self.lr0 <= 0 or self.noise < 0:
            raise ValueError("lr0 must be positive and noise non-negative")
        names = [n for n, _ in self.layout]
        if len(set(names)) != len(names) or not names:
            raise ValueError("layout needs unique tensor names")

    @property
    def num_params(self) -> int:
        return sum(int(np.prod(s)) for _, s in self.layout)


def _init(name: str, shape, rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".bias"):
        return rng.normal(0.0, 0.02, shape)
    if len(shape) == 1:
        # norm gains sit around one
        return 1.0 + rng.normal(0.0, 0.1, shape)
    return rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)


def generate(spec: TrajectorySpec) -> list[tuple[Checkpoint, Checkpoint]]:
    """``spec.steps`` pairs of (checkpoint, gradient), steps numbered from 1."""
    rng = np.random.default_rng(spec.seed)
    w = {name: _init(name, shape, rng) for name, shape in spec.layout}
    out = []
    for t in range(spec.steps):
        g = {}
        for name, arr in w.items():
            rms = float(np.sqrt(np.mean(arr * arr)))
            g[name] = spec.pull * arr + spec.noise * rms * rng.standard_normal(arr.shape)
        out.append((make_checkpoint(w, step=t + 1), make_checkpoint(g, step=t + 1)))
        lr = spec.lr0 * spec.decay ** t
        w = {name: arr - lr * g[name] for name, arr in w.items()}
    return out


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:05d}.dqt"


def gradient_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"grad_{step:05d}.dqt"


def write_trajectory(spec: TrajectorySpec, out_dir: str | os.PathLike) -> list[Path]:
    """Write every checkpoint and gradient as DQT1 files; returns the checkpoint paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for ckpt, grad in generate(spec):
        p = checkpoint_path(out_dir, ckpt.step)
        write_checkpoint(ckpt, p)
        write_checkpoint(grad, gradient_path(out_dir, grad.step))
        paths.append(p)
    return paths
