"""Reference implementations of the hot loops (numpy + plain Python).

``_ckernels.pyx`` mirrors this module function for function; the two must
produce identical output for identical input.
"""
import numpy as np


def rle_encode(values):
    """Emit ``-v`` per run, followed by the run length when it exceeds one."""
    v = np.asarray(values, dtype=np.int64)
    if v.size == 0:
        return np.empty(0, dtype=np.int64)
    starts = np.flatnonzero(np.concatenate(([True], v[1:] != v[:-1])))
    lengths = np.diff(np.append(starts, v.size))
    long_run = lengths > 1
    out = np.empty(starts.size + int(long_run.sum()), dtype=np.int64)
    # each run occupies 1 slot, plus one more when its length is stored
    pos = np.concatenate(([0], np.cumsum(1 + long_run)[:-1]))
    out[pos] = -v[starts]
    out[pos[long_run] + 1] = lengths[long_run]
    return out


def rle_decode(symbols, n):
    s = np.asarray(symbols, dtype=np.int64)
    if s.size == 0:
        if n:
            raise ValueError("empty run-length stream for non-empty group")
        return np.empty(0, dtype=np.int64)
    is_val = s <= 0
    if not is_val[0]:
        raise ValueError("run-length stream starts with a run length")
    if np.any(~is_val[1:] & ~is_val[:-1]):
        raise ValueError("two consecutive run lengths")
    val_pos = np.flatnonzero(is_val)
    lengths = np.ones(val_pos.size, dtype=np.int64)
    nxt = val_pos + 1
    has_len = nxt < s.size
    has_len[has_len] = ~is_val[nxt[has_len]]
    lengths[has_len] = s[nxt[has_len]]
    if np.any(lengths[has_len] < 2):
        raise ValueError("stored run length below 2")
    if int(lengths.sum()) != n:
        raise ValueError(f"run lengths sum to {int(lengths.sum())}, expected {n}")
    return np.repeat(-s[val_pos], lengths)


def huffman_pack(idx, codes, lengths):
    """Concatenate ``codes[idx]`` MSB-first into a zero-padded byte string."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        return b""
    c = np.asarray(codes, dtype=np.uint64)[idx]
    ln = np.asarray(lengths, dtype=np.int64)[idx]
    total = int(ln.sum())
    owner = np.repeat(np.arange(idx.size), ln)
    start = np.concatenate(([0], np.cumsum(ln)[:-1]))
    shift = (ln[owner] - 1 - (np.arange(total) - start[owner])).astype(np.uint64)
    bits = ((c[owner] >> shift) & np.uint64(1)).astype(np.uint8)
    return np.packbits(bits).tobytes()


def huffman_unpack(data, n_symbols, first_code, counts, offsets, max_len):
    """Canonical decode; returns positions in the canonical symbol order."""
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8)).tolist()
    nbits = len(bits)
    first_code = [int(x) for x in first_code]
    counts = [int(x) for x in counts]
    offsets = [int(x) for x in offsets]
    out = np.empty(n_symbols, dtype=np.int64)
    pos = 0
    for i in range(n_symbols):
        code = 0
        length = 0
        while True:
            if pos >= nbits:
                raise ValueError("bitstream exhausted")
            code = (code << 1) | bits[pos]
            pos += 1
            length += 1
            rel = code - first_code[length]
            if 0 <= rel < counts[length]:
                out[i] = offsets[length] + rel
                break
            if length >= max_len:
                raise ValueError("invalid code in bitstream")
    return out


def lloyd_step(points, weights, centers):
    """One assignment pass against sorted ``centers``.

    Returns per-cluster weighted sums and weights, the weighted squared loss,
    and the index of the point with the largest weighted squared distance.
    Ties go to the lower center.
    """
    x = np.asarray(points, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    c = np.asarray(centers, dtype=np.float64)
    k = c.size
    mids = (c[1:] + c[:-1]) * 0.5
    label = np.searchsorted(mids, x, side="left")
    d = x - c[label]
    wd2 = w * d * d
    sums = np.bincount(label, weights=w * x, minlength=k)
    wsums = np.bincount(label, weights=w, minlength=k)
    far = int(np.argmax(wd2)) if x.size else -1
    return sums, wsums, float(wd2.sum()), far


def assign_nearest(points, centers):
    """Index of the nearest sorted center for each point (ties to the lower index)."""
    c = np.asarray(centers, dtype=np.float64)
    mids = (c[1:] + c[:-1]) * 0.5
    return np.searchsorted(mids, np.asarray(points, dtype=np.float64), side="left")
