"""Checkpoint data model and the DQT1 binary container.

Layout (all integers little-endian)::

    magic      4s   b"DQT1"
    version    u32  1 or 2
    step       u64                                        (version 2 only)
    n_meta     u32                                        (version 2 only)
      key_len u16, key utf-8, val_len u32, val utf-8     (n_meta times)
    n_tensors  u32
      name_len u16, name utf-8, layer_type u8, rank u8,
      dims u64 * rank, payload f32 * prod(dims)           (n_tensors times)

A checkpoint with step 0 and no metadata is written as version 1, the plain
layout without the two optional fields; anything else needs version 2.
Nothing follows the last payload; trailing bytes are rejected.
"""
from __future__ import annotations

import enum
import fnmatch
import os
import struct
from dataclasses import dataclass, field
from math import prod
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BadMagic, NonFiniteData, ShapeMismatch, TruncatedFile

MAGIC = b"DQT1"
FORMAT_VERSION = 1
EXTENDED_VERSION = 2


class LayerType(enum.IntEnum):
    CONV = 0
    LINEAR = 1
    ATTENTION = 2
    NORM = 3
    EMBEDDING = 4
    BIAS = 5
    OTHER = 6


@dataclass(frozen=True, eq=False)
class NamedTensor:
    name: str
    shape: tuple[int, ...]
    data: np.ndarray
    layer_type: LayerType = LayerType.OTHER

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in shape):
            raise ShapeMismatch(f"{self.name}: dims must be positive, got {shape}")
        data = np.ascontiguousarray(self.data, dtype=np.float32).reshape(-1)
        if data.size != prod(shape):
            raise ShapeMismatch(
                f"{self.name}: {data.size} elements for shape {shape} (expected {prod(shape)})"
            )
        if data.flags.writeable:
            data = data.copy()
            data.flags.writeable = False
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layer_type", LayerType(self.layer_type))

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def array(self) -> np.ndarray:
        return self.data.reshape(self.shape)

    def __eq__(self, other):
        if not isinstance(other, NamedTensor):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.layer_type == other.layer_type
            and np.array_equal(self.data.view(np.uint32), other.data.view(np.uint32))
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Checkpoint:
    tensors: tuple[NamedTensor, ...] = ()
    step: int = 0
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        tensors = tuple(self.tensors)
        names = [t.name for t in tensors]
        if len(set(names)) != len(names):
            raise ShapeMismatch("tensor names must be unique within a checkpoint")
        if self.step < 0:
            raise ValueError("step must be non-negative")
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "meta", MappingProxyType(dict(self.meta)))

    def __getitem__(self, name: str) -> NamedTensor:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    @property
    def names(self) -> list[str]:
        return [t.name for t in self.tensors]

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors)

    @property
    def raw_bytes(self) -> int:
        return 4 * self.num_params

    def by_layer_type(self) -> dict[LayerType, list[NamedTensor]]:
        groups: dict[LayerType, list[NamedTensor]] = {}
        for t in self.tensors:
            groups.setdefault(t.layer_type, []).append(t)
        return groups

    def is_finite(self) -> bool:
        return all(np.isfinite(t.data).all() for t in self.tensors)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (
            self.step == other.step
            and dict(self.meta) == dict(other.meta)
            and self.tensors == other.tensors
        )

    __hash__ = None


# A gradient snapshot is structurally a checkpoint aligned by name and shape.
GradientSnapshot = Checkpoint


def check_aligned(ckpt: Checkpoint, other: Checkpoint) -> None:
    """Raise ShapeMismatch unless ``other`` has exactly ckpt's names and shapes."""
    a = {t.name: t.shape for t in ckpt}
    b = {t.name: t.shape for t in other}
    if a != b:
        missing = sorted(set(a) ^ set(b))
        detail = f"names differ: {missing}" if missing else "shapes differ"
        raise ShapeMismatch(f"snapshots are not aligned ({detail})")


# ---------------------------------------------------------------------------
# serialization

def _encode_str(s: str, width: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<" + width, len(raw)) + raw


def dumps_checkpoint(ckpt: Checkpoint) -> bytes:
    if not ckpt.is_finite():
        raise NonFiniteData("checkpoint contains NaN or Inf")
    if ckpt.step == 0 and not ckpt.meta:
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    else:
        parts = [MAGIC, struct.pack("<IQI", EXTENDED_VERSION, ckpt.step, len(ckpt.meta))]
        for key in sorted(ckpt.meta):
            parts.append(_encode_str(key, "H"))
            parts.append(_encode_str(ckpt.meta[key], "I"))
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for t in ckpt.tensors:
        parts.append(_encode_str(t.name, "H"))
        parts.append(struct.pack("<BB", int(t.layer_type), len(t.shape)))
        parts.append(struct.pack(f"<{len(t.shape)}Q", *t.shape))
        parts.append(t.data.astype("<f4", copy=False).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(f"need {n} bytes at offset {self.pos}, file has {len(self.buf)}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self, width: str) -> str:
        (n,) = self.unpack("<" + width)
        return bytes(self.take(n)).decode("utf-8")


def loads_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or bytes(r.take(4)) != MAGIC:
        raise BadMagic(f"not a DQT1 file (magic {bytes(buf[:4])!r})")
    (version,) = r.unpack("<I")
    if version == FORMAT_VERSION:
        step, n_meta = 0, 0
    elif version == EXTENDED_VERSION:
        step, n_meta = r.unpack("<QI")
    else:
        raise BadMagic(f"unsupported DQT1 version {version}")
    meta = {}
    for _ in range(n_meta):
        key = r.string("H")
        meta[key] = r.string("I")
    (n_tensors,) = r.unpack("<I")
    tensors = []
    for _ in range(n_tensors):
        name = r.string("H")
        lt, rank = r.unpack("<BB")
        dims = r.unpack(f"<{rank}Q")
        try:
            layer_type = LayerType(lt)
        except ValueError:
            raise ShapeMismatch(f"{name}: unknown layer type {lt}") from None
        if any(d == 0 for d in dims):
            raise ShapeMismatch(f"{name}: zero-sized dimension in {dims}")
        count = prod(dims)
        data = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32)
        if not np.isfinite(data).all():
            raise NonFiniteData(f"{name}: non-finite values")
        tensors.append(NamedTensor(name, dims, data, layer_type))
    if r.pos != len(buf):
        raise ShapeMismatch(f"{len(buf) - r.pos} trailing bytes after declared payload")
    return Checkpoint(tuple(tensors), step=step, meta=meta)


def write_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    data = dumps_checkpoint(ckpt)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def read_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# layer-type classification

DEFAULT_LAYER_RULES: tuple[tuple[str, LayerType], ...] = (
    ("*embed*", LayerType.EMBEDDING),
    ("*wte*", LayerType.EMBEDDING),
    ("*wpe*", LayerType.EMBEDDING),
    ("*.bias", LayerType.BIAS),
    ("*norm*", LayerType.NORM),
    ("*ln_*", LayerType.NORM),
    ("*.ln*", LayerType.NORM),
    ("*bn*", LayerType.NORM),
    ("*attn*", LayerType.ATTENTION),
    ("*attention*", LayerType.ATTENTION),
    ("*conv*", LayerType.CONV),
    ("*fc*", LayerType.LINEAR),
    ("*linear*", LayerType.LINEAR),
    ("*mlp*", LayerType.LINEAR),
    ("*proj*", LayerType.LINEAR),
    ("*dense*", LayerType.LINEAR),
    ("*head*", LayerType.LINEAR),
    ("*", LayerType.OTHER),
)


def classify_layer_type(name: str, rules: Sequence[tuple[str, LayerType]] = DEFAULT_LAYER_RULES) -> LayerType:
    """Return the layer type of the first rule whose glob matches ``name``."""
    for pattern, layer_type in rules:
        if fnmatch.fnmatchcase(name, pattern):
            return LayerType(layer_type)
    return LayerType.OTHER


def parse_layer_rules(text: str) -> list[tuple[str, LayerType]]:
    """Parse ``pattern = LAYERTYPE`` lines; blank lines and ``#`` comments are skipped."""
    rules = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        pattern, sep, kind = line.rpartition("=")
        if not sep or not pattern.strip():
            raise ValueError(f"line {lineno}: expected 'pattern = LAYERTYPE'")
        try:
            rules.append((pattern.strip(), LayerType[kind.strip().upper()]))
        except KeyError:
            raise ValueError(f"line {lineno}: unknown layer type {kind.strip()!r}") from None
    if not rules or rules[-1][0] != "*":
        rules.append(("*", LayerType.OTHER))
    return rules


def load_layer_rules(path: str | os.PathLike) -> list[tuple[str, LayerType]]:
    with open(path, encoding="utf-8") as fh:
        return parse_layer_rules(fh.read())


def reclassify(ckpt: Checkpoint, rules: Sequence[tuple[str, LayerType]]) -> Checkpoint:
    tensors = [
        NamedTensor(t.name, t.shape, t.data, classify_layer_type(t.name, rules)) for t in ckpt
    ]
    return Checkpoint(tuple(tensors), step=ckpt.step, meta=ckpt.meta)


def make_checkpoint(
    arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    step: int = 0,
    rules: Sequence[tuple[str, LayerType]] = DEFAULT_LAYER_RULES,
    meta: Mapping[str, str] | None = None,
) -> Checkpoint:
    """Build a checkpoint from named arrays, classifying layer types by name."""
    items = arrays.items() if isinstance(arrays, Mapping) else arrays
    tensors = []
    for name, arr in items:
        arr = np.asarray(arr, dtype=np.float32)
        shape = arr.shape if arr.ndim else ()
        tensors.append(NamedTensor(name, shape, arr.reshape(-1), classify_layer_type(name, rules)))
    return Checkpoint(tuple(tensors), step=step, meta=meta or {})
