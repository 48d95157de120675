"""Run-length coding with sign-separated run lengths, and canonical Huffman coding."""
from __future__ import annotations

import heapq
from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..errors import CorruptBitstream
from .bytesio import Reader, Writer

MAX_CODE_LEN = 62


END_OF_GROUP = 1


def rle_encode(group, end_marker: bool = False) -> np.ndarray:
    """``[0,0,0,2,1,1] -> [0, 3, -2, -1, 2]``: values negated, run lengths > 1 follow as positives.

    With ``end_marker`` a stored final run length is replaced by
    ``END_OF_GROUP`` (a length that never occurs otherwise), meaning "to the
    end of the group".  Streams of many groups then split without stored
    symbol counts, and the marker is cheap because it repeats.
    """
    v = np.asarray(group, dtype=np.int64)
    if v.size and v.min() < 0:
        raise ValueError("run-length input must be non-negative")
    out = kernels.rle_encode(v)
    if end_marker and out.size and out[-1] > 0:
        out[-1] = END_OF_GROUP
    return out


def rle_decode(symbols, n: int, end_marker: bool = False) -> np.ndarray:
    if end_marker:
        return rle_decode_groups(symbols, [n])
    try:
        return kernels.rle_decode(np.asarray(symbols, dtype=np.int64), n)
    except ValueError as exc:
        raise CorruptBitstream(f"bad run-length stream: {exc}") from None


def rle_decode_groups(symbols, sizes) -> np.ndarray:
    """Decode consecutive end-marked groups of the given sizes into one array."""
    s = np.array(symbols, dtype=np.int64)
    sizes = [int(n) for n in sizes]
    is_len = s > 0
    if s.size and (is_len[0] or np.any(is_len[1:] & is_len[:-1])):
        raise CorruptBitstream("bad run-length stream: misplaced run length")
    vals = np.flatnonzero(~is_len)
    nxt = vals + 1
    has_len = nxt < s.size
    has_len[has_len] = is_len[nxt[has_len]]
    run = np.ones(vals.size, dtype=np.int64)
    run[has_len] = s[nxt[has_len]]
    is_end = has_len & (run == END_OF_GROUP)
    run[is_end] = 0
    csum = np.cumsum(run)
    ends = np.flatnonzero(is_end)
    r0 = 0
    base = 0
    for n in sizes:
        if n == 0:
            continue
        # the group closes at its end marker or where its explicit runs reach n
        j = int(np.searchsorted(csum, base + n, side="left"))
        k = int(np.searchsorted(ends, r0))
        e = int(ends[k]) if k < ends.size else vals.size
        if e < j or (e == j and e < vals.size):
            fill = n - (int(csum[e]) - base)
            if fill < 2:
                raise CorruptBitstream("bad run-length stream: end marker covers fewer than 2 values")
            run[e] = fill
            csum[e:] += fill
            j = e
        elif j >= vals.size or csum[j] != base + n:
            raise CorruptBitstream("bad run-length stream: runs overflow their group")
        base += n
        r0 = j + 1
    if r0 != vals.size:
        raise CorruptBitstream("bad run-length stream: symbols left after the last group")
    return np.repeat(-s[vals], run)


@dataclass(frozen=True, eq=False)
class HuffmanTable:
    """Symbols in canonical order (by code length, then symbol) with their code lengths."""

    symbols: np.ndarray
    lengths: np.ndarray

    def __len__(self):
        return self.symbols.size

    def codes(self) -> np.ndarray:
        codes = np.empty(self.symbols.size, dtype=np.uint64)
        code = 0
        prev = int(self.lengths[0]) if self.symbols.size else 0
        for i, ln in enumerate(self.lengths.tolist()):
            code <<= ln - prev
            prev = ln
            codes[i] = code
            code += 1
        return codes

    def code_of(self, symbol: int) -> str:
        i = int(np.flatnonzero(self.symbols == symbol)[0])
        return format(int(self.codes()[i]), f"0{int(self.lengths[i])}b")

    def decode_tables(self):
        max_len = int(self.lengths.max())
        counts = np.bincount(self.lengths.astype(np.int64), minlength=max_len + 1)
        first = np.zeros(max_len + 2, dtype=np.int64)
        offsets = np.zeros(max_len + 2, dtype=np.int64)
        code = 0
        off = 0
        for ln in range(1, max_len + 1):
            first[ln] = code
            offsets[ln] = off
            code = (code + counts[ln]) << 1
            off += counts[ln]
        return first, np.append(counts, 0), offsets, max_len

    def write(self, w: Writer) -> None:
        """Symbol count per code length, then each length's symbols as ascending gaps."""
        max_len = int(self.lengths.max()) if self.symbols.size else 0
        w.uvar(max_len)
        counts = np.bincount(self.lengths.astype(np.int64), minlength=max_len + 1)
        for ln in range(1, max_len + 1):
            w.uvar(int(counts[ln]))
        prev_len = None
        prev = 0
        for s, ln in zip(self.symbols.tolist(), self.lengths.tolist()):
            if ln != prev_len:
                w.svar(s)
            else:
                w.uvar(s - prev)
            prev, prev_len = s, ln

    @classmethod
    def read(cls, r: Reader) -> "HuffmanTable":
        max_len = r.uvar()
        if max_len > MAX_CODE_LEN:
            raise CorruptBitstream(f"code length {max_len} exceeds limit")
        counts = [r.uvar() for _ in range(max_len)]
        lengths = np.repeat(np.arange(1, max_len + 1), counts).astype(np.uint8)
        symbols = np.empty(lengths.size, dtype=np.int64)
        prev_len = None
        prev = 0
        for i, ln in enumerate(lengths.tolist()):
            prev = r.svar() if ln != prev_len else prev + r.uvar()
            symbols[i] = prev
            prev_len = ln
        return cls(symbols, lengths)


def code_lengths(counts) -> np.ndarray:
    """Huffman code lengths for ``counts`` (one symbol gets length 1)."""
    counts = [int(c) for c in counts]
    n = len(counts)
    if n == 0:
        return np.empty(0, dtype=np.uint8)
    if n == 1:
        return np.ones(1, dtype=np.uint8)
    heap = [(c, i) for i, c in enumerate(counts)]
    heapq.heapify(heap)
    parent = [0] * (2 * n - 1)
    nxt = n
    while len(heap) > 1:
        c1, a = heapq.heappop(heap)
        c2, b = heapq.heappop(heap)
        parent[a] = parent[b] = nxt
        heapq.heappush(heap, (c1 + c2, nxt))
        nxt += 1
    depth = [0] * (2 * n - 1)
    for node in range(2 * n - 3, -1, -1):
        depth[node] = depth[parent[node]] + 1
    lengths = np.array(depth[:n], dtype=np.int64)
    if lengths.max() > MAX_CODE_LEN:
        raise ValueError("symbol distribution too skewed for 62-bit codes")
    return lengths.astype(np.uint8)


def build_table(symbols: np.ndarray, counts: np.ndarray) -> HuffmanTable:
    lengths = code_lengths(counts)
    order = np.lexsort((symbols, lengths))
    return HuffmanTable(np.asarray(symbols, dtype=np.int64)[order], lengths[order])


def huffman_encode(symbols) -> tuple[HuffmanTable, bytes]:
    s = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if s.size == 0:
        raise ValueError("cannot Huffman-code an empty stream")
    uniq, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    table = build_table(uniq, counts)
    # position of each unique symbol in canonical order
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.searchsorted(uniq, table.symbols)] = np.arange(uniq.size)
    data = kernels.huffman_pack(rank[inverse.reshape(-1)], table.codes(), table.lengths.astype(np.int64))
    return table, data


def huffman_decode(table: HuffmanTable, data: bytes, n_symbols: int) -> np.ndarray:
    if n_symbols == 0:
        return np.empty(0, dtype=np.int64)
    if len(table) == 0:
        raise CorruptBitstream("empty Huffman table for non-empty stream")
    first, counts, offsets, max_len = table.decode_tables()
    try:
        pos = kernels.huffman_unpack(data, n_symbols, first, counts, offsets, max_len)
    except ValueError as exc:
        raise CorruptBitstream(f"Huffman decode failed: {exc}") from None
    return table.symbols[pos]


# one coded stream = symbol count, table, bitstream

def write_stream(w: Writer, symbols: np.ndarray) -> None:
    w.uvar(symbols.size)
    if symbols.size == 0:
        return
    table, data = huffman_encode(symbols)
    table.write(w)
    w.blob(data)


def read_stream(r: Reader) -> np.ndarray:
    n = r.uvar()
    if n == 0:
        return np.empty(0, dtype=np.int64)
    table = HuffmanTable.read(r)
    data = r.blob()
    return huffman_decode(table, data, n)
