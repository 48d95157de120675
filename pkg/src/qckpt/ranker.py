"""Parameter importance scores and the gradient moving average."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .container import Checkpoint, GradientSnapshot, LayerType, NamedTensor, read_checkpoint, write_checkpoint
from .errors import MissingGradients, ShapeMismatch

DEFAULT_BETA = 0.9


@dataclass(frozen=True)
class EmaState:
    beta: float = DEFAULT_BETA
    tensors: Mapping[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0

    def __post_init__(self):
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")


@dataclass(frozen=True)
class ScoreSet:
    magnitude: Mapping[str, np.ndarray]
    sensitivity: Mapping[str, np.ndarray] | None = None

    @property
    def has_sensitivity(self) -> bool:
        return self.sensitivity is not None


def ema_update(state: EmaState, grads: GradientSnapshot) -> EmaState:
    """Fold one gradient snapshot into the EMA; the first snapshot initializes it."""
    new = {}
    for t in grads:
        g = t.data.astype(np.float32)
        if state.step_count == 0:
            new[t.name] = g.copy()
            continue
        old = state.tensors.get(t.name)
        if old is None or old.shape != g.shape:
            raise ShapeMismatch(f"gradient {t.name!r} does not match the tracked EMA")
        new[t.name] = (np.float32(state.beta) * g + np.float32(1.0 - state.beta) * old).astype(np.float32)
    if state.step_count and set(new) != set(state.tensors):
        raise ShapeMismatch("gradient snapshot names differ from the tracked EMA")
    return EmaState(state.beta, new, state.step_count + 1)


def magnitude_scores(ckpt: Checkpoint) -> dict[str, np.ndarray]:
    return {t.name: np.abs(t.data) for t in ckpt}


def sensitivity_scores(ckpt: Checkpoint, ema: EmaState) -> dict[str, np.ndarray]:
    """First-order Taylor importance ``|g * w|`` with the EMA standing in for ``g``."""
    out = {}
    for t in ckpt:
        g = ema.tensors.get(t.name)
        if g is None:
            raise MissingGradients(f"no gradient EMA for tensor {t.name!r}")
        if g.shape != t.data.shape:
            raise ShapeMismatch(f"EMA for {t.name!r} has {g.size} elements, tensor has {t.size}")
        out[t.name] = np.abs(g * t.data)
    return out


def compute_scores(ckpt: Checkpoint, ema: EmaState | None = None) -> ScoreSet:
    sens = None
    if ema is not None and ema.step_count > 0:
        sens = sensitivity_scores(ckpt, ema)
    return ScoreSet(magnitude_scores(ckpt), sens)


# persistence: DQT1 container, EMA arrays as tensors, beta and step_count in meta

def save_ema(state: EmaState, path: str | os.PathLike, like: Checkpoint | None = None) -> None:
    shapes = {t.name: (t.shape, t.layer_type) for t in like} if like is not None else {}
    tensors = []
    for name in sorted(state.tensors):
        arr = state.tensors[name]
        shape, lt = shapes.get(name, ((arr.size,), LayerType.OTHER))
        tensors.append(NamedTensor(name, shape, arr, lt))
    meta = {"beta": repr(float(state.beta)), "step_count": str(state.step_count)}
    write_checkpoint(Checkpoint(tuple(tensors), meta=meta), path)


def load_ema(path: str | os.PathLike) -> EmaState:
    ck = read_checkpoint(path)
    tensors = {t.name: t.data.copy() for t in ck}
    return EmaState(float(ck.meta["beta"]), tensors, int(ck.meta["step_count"]))


def ema_matches(state: EmaState, ckpt: Checkpoint) -> bool:
    return {t.name: t.size for t in ckpt} == {n: a.size for n, a in state.tensors.items()}
