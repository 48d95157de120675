"""Cyclic index deltas between quantized checkpoints and the DQDR record format.

A record turns ``prev`` into ``cur``.  Per tensor, the level-index delta
``D = (prev - cur) mod B`` is split into groups by the *previous* index of each
element, each group is run-length coded and the result Huffman coded.  A FULL
record is the same thing against an all-zero base with no protected values.

Byte layout (integers are LEB128 varints unless noted; fixed fields little-endian)::

    "DQDR" | version u8 | scheme u8 | flags u8 (bit0: has base)
    [base_step svar] | target_step svar | B uvar | quality_delta f64
    config | codebooks | tensor count
    per tensor: name blob | layer type u8 | ndim, dims | payload blob
    index crc32 u32 | record crc32 u32

A tensor payload is one Huffman stream of delta symbols followed by the
protected-value stream.  For the rearranged scheme the delta stream holds one
run-length group per bucket of the base state, in ascending bucket order; the
decoder recovers bucket ids and group sizes from the base, so none are
stored, and each group's final run length is written as an end marker.

Protected bfloat16 values are XORed with the previous value at the same
position (zero where the previous checkpoint was not protected), so a
parameter that stays protected and unchanged costs nearly nothing.
"""
from __future__ import annotations

import enum
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from ..container import LayerType
from ..errors import ChecksumMismatch, CorruptBitstream, ShapeMismatch
from ..quantizer import Metric, QuantConfig, QuantizedCheckpoint, QuantizedTensor
from .bytesio import Reader, Writer
from .entropy import HuffmanTable, huffman_decode, huffman_encode, rle_decode, rle_decode_groups, rle_encode

MAGIC = b"DQDR"
VERSION = 1


class Scheme(enum.IntEnum):
    """Delta encodings: Huffman only, run-length + Huffman, rearranged run-length + Huffman."""

    HE = 0
    RLE = 1
    PE = 2


# ---------------------------------------------------------------------------
# index arithmetic

def cyclic_size(prev: QuantizedCheckpoint | None, cur: QuantizedCheckpoint) -> int:
    """Largest alphabet (levels + pruned + protected) over every tensor of either state."""
    sizes = [cur.alphabet(t) for t in cur]
    if prev is not None:
        sizes += [prev.alphabet(t) for t in prev]
    return max(sizes, default=2)


def _check_aligned(prev: QuantizedCheckpoint, cur: QuantizedCheckpoint):
    if [(t.name, t.shape) for t in prev] != [(t.name, t.shape) for t in cur]:
        raise ShapeMismatch("checkpoints differ in tensor names or shapes")


def delta_compute(prev: QuantizedCheckpoint, cur: QuantizedCheckpoint) -> tuple[int, dict[str, np.ndarray]]:
    """``(B, {name: (prev - cur) mod B})`` with B the record-wide cyclic alphabet."""
    _check_aligned(prev, cur)
    b = cyclic_size(prev, cur)
    return b, {p.name: _delta(p.indices, c.indices, b) for p, c in zip(prev, cur)}


def _delta(prev_idx: np.ndarray, cur_idx: np.ndarray, b: int) -> np.ndarray:
    return np.mod(prev_idx.astype(np.int64) - cur_idx.astype(np.int64), b)


def delta_apply(prev_idx: np.ndarray, delta: np.ndarray, b: int) -> np.ndarray:
    """Invert :func:`delta_compute` for one tensor: ``cur = (prev - D) mod B``."""
    return np.mod(np.asarray(prev_idx, dtype=np.int64) - delta, b)


def rearrange(delta, prev_indices) -> dict[int, np.ndarray]:
    """Group ``delta`` by the previous index of each element, keeping scan order within a group."""
    delta = np.asarray(delta)
    prev_indices = np.asarray(prev_indices)
    if delta.shape != prev_indices.shape:
        raise ShapeMismatch("delta and previous indices differ in length")
    order = np.argsort(prev_indices, kind="stable")
    buckets, counts = np.unique(prev_indices, return_counts=True)
    parts = np.split(delta[order], np.cumsum(counts)[:-1])
    return {int(b): p for b, p in zip(buckets, parts)}


def unrearrange(groups: dict[int, np.ndarray], prev_indices) -> np.ndarray:
    """Scatter grouped deltas back to their original positions."""
    prev_indices = np.asarray(prev_indices)
    order = np.argsort(prev_indices, kind="stable")
    buckets, counts = np.unique(prev_indices, return_counts=True)
    if sorted(groups) != buckets.tolist():
        raise CorruptBitstream("delta groups do not match the base state's buckets")
    for b, c in zip(buckets.tolist(), counts.tolist()):
        if groups[b].size != c:
            raise CorruptBitstream(f"group {b} holds {groups[b].size} deltas, expected {c}")
    out = np.empty(prev_indices.size, dtype=np.int64)
    if out.size:
        out[order] = np.concatenate([groups[b] for b in buckets.tolist()])
    return out


def index_checksum(q: QuantizedCheckpoint) -> int:
    """CRC-32 of every tensor's indices as little-endian uint32, in tensor order."""
    crc = 0
    for t in q:
        crc = zlib.crc32(t.indices.astype("<u4").tobytes(), crc)
    return crc


# ---------------------------------------------------------------------------
# record types

@dataclass(frozen=True, eq=False)
class EncodedStream:
    """A Huffman-coded integer stream: symbol count, canonical table, bitstream."""

    n_symbols: int
    table: HuffmanTable
    data: bytes

    @classmethod
    def encode(cls, symbols: np.ndarray) -> "EncodedStream | None":
        if symbols.size == 0:
            return None
        table, data = huffman_encode(symbols)
        return cls(int(symbols.size), table, data)

    def decode(self) -> np.ndarray:
        return huffman_decode(self.table, self.data, self.n_symbols)


@dataclass(frozen=True, eq=False)
class TensorDelta:
    """One tensor's coded delta.

    For PE, ``stream`` concatenates one end-marked run-length group per
    base-state bucket in ascending bucket order; bucket ids and group sizes
    are implied by the base state.  RLE codes the tensor as a single group
    and HE Huffman-codes the raw deltas.
    """

    name: str
    shape: tuple[int, ...]
    layer_type: LayerType
    stream: EncodedStream | None
    protected: EncodedStream | None

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


@dataclass(frozen=True, eq=False)
class DeltaRecord:
    base_step: int | None
    target_step: int
    cyclic: int
    scheme: Scheme
    config: QuantConfig
    codebooks: dict[LayerType, np.ndarray]
    tensors: tuple[TensorDelta, ...]
    checksum: int
    quality_delta: float = float("nan")

    @property
    def is_full(self) -> bool:
        return self.base_step is None

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.tensors)

    @property
    def raw_bytes(self) -> int:
        return 4 * self.num_params

    def to_bytes(self) -> bytes:
        return _serialize(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeltaRecord":
        return _parse(data)


# ---------------------------------------------------------------------------
# encode / decode

def delta_symbols(delta: np.ndarray, prev_idx: np.ndarray, scheme: Scheme) -> np.ndarray:
    """The integer stream a scheme hands to the Huffman coder for one tensor."""
    if scheme == Scheme.HE:
        return np.asarray(delta, dtype=np.int64)
    if scheme == Scheme.RLE:
        return rle_encode(delta, end_marker=True)
    return np.concatenate([rle_encode(g, end_marker=True) for g in rearrange(delta, prev_idx).values()])


def _protected_ref(prev_t: QuantizedTensor | None, prev_k: int, cur_pos: np.ndarray) -> np.ndarray:
    """Previous bfloat16 bits at ``cur_pos`` (zero where the previous state was not protected)."""
    ref = np.zeros(cur_pos.size, dtype=np.uint16)
    if prev_t is None or prev_t.protected_values.size == 0 or cur_pos.size == 0:
        return ref
    prev_pos = np.flatnonzero(prev_t.indices == prev_k + 1)
    at = np.minimum(np.searchsorted(prev_pos, cur_pos), prev_pos.size - 1)
    hit = prev_pos[at] == cur_pos
    ref[hit] = prev_t.protected_values[at[hit]]
    return ref


def _base(prev: QuantizedCheckpoint | None, i: int, size: int):
    if prev is None:
        return None, np.zeros(size, dtype=np.int64), 0
    p = prev.tensors[i]
    return p, p.indices, prev.levels(p)


def _encode_tensor(prev: QuantizedCheckpoint | None, cur: QuantizedCheckpoint, i: int, b: int,
                   scheme: Scheme) -> TensorDelta:
    c = cur.tensors[i]
    p, prev_idx, prev_k = _base(prev, i, c.size)
    stream = EncodedStream.encode(delta_symbols(_delta(prev_idx, c.indices, b), prev_idx, scheme))
    prot = None
    if c.protected_values.size:
        ref = _protected_ref(p, prev_k, cur.protected_positions(c))
        prot = EncodedStream.encode(rle_encode(c.protected_values ^ ref, end_marker=True))
    return TensorDelta(c.name, c.shape, c.layer_type, stream, prot)


def encode_delta_record(prev: QuantizedCheckpoint | None, cur: QuantizedCheckpoint,
                        scheme: Scheme = Scheme.PE, quality_delta: float = float("nan"),
                        workers: int = 1) -> DeltaRecord:
    """Encode ``cur`` relative to ``prev``; ``prev=None`` gives a FULL record."""
    if prev is not None:
        _check_aligned(prev, cur)
    scheme = Scheme(scheme)
    b = cyclic_size(prev, cur)

    def enc(i):
        return _encode_tensor(prev, cur, i, b, scheme)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            tensors = tuple(ex.map(enc, range(len(cur))))
    else:
        tensors = tuple(map(enc, range(len(cur))))
    return DeltaRecord(
        base_step=None if prev is None else prev.step,
        target_step=cur.step,
        cyclic=b,
        scheme=scheme,
        config=cur.config,
        codebooks={lt: cb.copy() for lt, cb in cur.codebooks.items()},
        tensors=tensors,
        checksum=index_checksum(cur),
        quality_delta=float(quality_delta),
    )


def _decode_delta(td: TensorDelta, prev_idx: np.ndarray, scheme: Scheme, b: int) -> np.ndarray:
    symbols = td.stream.decode() if td.stream is not None else np.empty(0, dtype=np.int64)
    if scheme == Scheme.HE:
        delta = symbols
    elif scheme == Scheme.RLE:
        delta = rle_decode(symbols, td.size, end_marker=True)
    else:
        order = np.argsort(prev_idx, kind="stable")
        _, counts = np.unique(prev_idx, return_counts=True)
        delta = np.empty(td.size, dtype=np.int64)
        delta[order] = rle_decode_groups(symbols, counts)
    if delta.size != td.size:
        raise CorruptBitstream(f"tensor {td.name!r}: decoded {delta.size} deltas, expected {td.size}")
    if delta.size and (delta.min() < 0 or delta.max() >= b):
        raise CorruptBitstream("delta outside the cyclic alphabet")
    return delta


def decode_delta_record(prev: QuantizedCheckpoint | None, rec: DeltaRecord) -> QuantizedCheckpoint:
    """Rebuild the target state; raises ChecksumMismatch if the indices disagree with the record."""
    if rec.is_full != (prev is None):
        raise CorruptBitstream("FULL records take no base; DELTA records need one")
    if prev is not None:
        if prev.step != rec.base_step:
            raise CorruptBitstream(f"record expects base step {rec.base_step}, got {prev.step}")
        if [(t.name, t.shape) for t in prev] != [(t.name, t.shape) for t in rec.tensors]:
            raise ShapeMismatch("record tensors differ from the base state")
    tensors = []
    for i, td in enumerate(rec.tensors):
        p, prev_idx, prev_k = _base(prev, i, td.size)
        cur_idx = delta_apply(prev_idx, _decode_delta(td, prev_idx, rec.scheme, rec.cyclic), rec.cyclic)
        cb = rec.codebooks.get(td.layer_type)
        k = 0 if cb is None else cb.size
        if cur_idx.max() > k + 1:
            raise ChecksumMismatch(f"tensor {td.name!r}: index beyond its alphabet")
        pos = np.flatnonzero(cur_idx == k + 1)
        if pos.size == 0:
            if td.protected is not None:
                raise CorruptBitstream(f"tensor {td.name!r}: protected values without positions")
            prot = np.empty(0, dtype=np.uint16)
        else:
            if td.protected is None:
                raise ChecksumMismatch(f"tensor {td.name!r}: protected values missing")
            xored = rle_decode(td.protected.decode(), pos.size, end_marker=True)
            if xored.max() > 0xFFFF:
                raise CorruptBitstream("protected value out of range")
            prot = xored.astype(np.uint16) ^ _protected_ref(p, prev_k, pos)
        tensors.append(QuantizedTensor(td.name, td.shape, td.layer_type, cur_idx.astype(np.uint16), prot))
    out = QuantizedCheckpoint(rec.target_step, rec.config, rec.codebooks, tuple(tensors))
    if index_checksum(out) != rec.checksum:
        raise ChecksumMismatch(f"index checksum mismatch at step {rec.target_step}")
    return out


# ---------------------------------------------------------------------------
# serialization

def _write_stream(w: Writer, s: EncodedStream | None):
    if s is None:
        w.uvar(0)
        return
    w.uvar(s.n_symbols)
    s.table.write(w)
    w.blob(s.data)


def _read_stream(r: Reader) -> EncodedStream | None:
    n = r.uvar()
    if n == 0:
        return None
    table = HuffmanTable.read(r)
    if len(table) == 0:
        raise CorruptBitstream("empty Huffman table for a non-empty stream")
    return EncodedStream(n, table, r.blob())


def _write_config(w: Writer, cfg: QuantConfig):
    w.uvar(cfg.bins)
    w.uvar(cfg.embed_bins)
    w.fixed("ddBdd", cfg.prune_frac, cfg.protect_frac, int(cfg.prune_metric), cfg.sigma, cfg.alpha)


def _read_config(r: Reader) -> QuantConfig:
    bins = r.uvar()
    embed = r.uvar()
    prune, protect, metric, sigma, alpha = r.fixed("ddBdd")
    return QuantConfig(bins, embed, prune, protect, Metric(metric), sigma, alpha)


def _serialize(rec: DeltaRecord) -> bytes:
    w = Writer()
    w.raw(MAGIC)
    w.fixed("BBB", VERSION, int(rec.scheme), 0 if rec.is_full else 1)
    if not rec.is_full:
        w.svar(rec.base_step)
    w.svar(rec.target_step)
    w.uvar(rec.cyclic)
    w.fixed("d", rec.quality_delta)
    _write_config(w, rec.config)
    w.uvar(len(rec.codebooks))
    for lt, cb in rec.codebooks.items():
        w.fixed("B", int(lt))
        w.uvar(cb.size)
        w.raw(cb.astype("<f4").tobytes())
    w.uvar(len(rec.tensors))
    for td in rec.tensors:
        w.blob(td.name.encode("utf-8"))
        w.fixed("B", int(td.layer_type))
        w.uvar(len(td.shape))
        for d in td.shape:
            w.uvar(d)
        pw = Writer()
        _write_stream(pw, td.stream)
        _write_stream(pw, td.protected)
        w.blob(pw.getvalue())
    w.fixed("I", rec.checksum)
    body = w.getvalue()
    return body + zlib.crc32(body).to_bytes(4, "little")


def _parse(data: bytes) -> DeltaRecord:
    try:
        return _parse_checked(bytes(data))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptBitstream(f"malformed record: {exc}") from None


def _parse_checked(data: bytes) -> DeltaRecord:
    if len(data) < 8 or data[:4] != MAGIC:
        raise CorruptBitstream("not a DQDR record")
    if zlib.crc32(data[:-4]) != int.from_bytes(data[-4:], "little"):
        raise ChecksumMismatch("record checksum mismatch")
    r = Reader(data[:-4], 4)
    version, scheme, flags = r.fixed("BBB")
    if version != VERSION:
        raise CorruptBitstream(f"unsupported DQDR version {version}")
    scheme = Scheme(scheme)
    base = r.svar() if flags & 1 else None
    target = r.svar()
    cyclic = r.uvar()
    (qd,) = r.fixed("d")
    cfg = _read_config(r)
    codebooks = {}
    for _ in range(r.uvar()):
        (lt,) = r.fixed("B")
        n = r.uvar()
        codebooks[LayerType(lt)] = np.frombuffer(r.raw(4 * n), dtype="<f4").astype(np.float32)
    tensors = []
    for _ in range(r.uvar()):
        name = r.blob().decode("utf-8")
        (lt,) = r.fixed("B")
        shape = tuple(r.uvar() for _ in range(r.uvar()))
        pr = Reader(r.blob())
        stream = _read_stream(pr)
        prot = _read_stream(pr)
        if pr.remaining:
            raise CorruptBitstream(f"trailing bytes in payload of {name!r}")
        tensors.append(TensorDelta(name, shape, LayerType(lt), stream, prot))
    (checksum,) = r.fixed("I")
    if r.remaining:
        raise CorruptBitstream("trailing bytes after record")
    return DeltaRecord(base, target, cyclic, scheme, cfg, codebooks, tuple(tensors), checksum, qd)


def encode_bytes(prev, cur, scheme: Scheme = Scheme.PE, **kw) -> bytes:
    return encode_delta_record(prev, cur, scheme, **kw).to_bytes()


def decode_bytes(prev, data: bytes) -> QuantizedCheckpoint:
    return decode_delta_record(prev, DeltaRecord.from_bytes(data))
