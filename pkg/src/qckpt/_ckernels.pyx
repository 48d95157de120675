# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the loops in ``_pykernels``; same signatures, same output."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport int64_t, uint64_t, uint8_t

cnp.import_array()


def rle_encode(values):
    cdef const int64_t[::1] v = np.ascontiguousarray(values, dtype=np.int64)
    cdef Py_ssize_t n = v.shape[0], i, j = 0
    out_arr = np.empty(2 * n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef int64_t cur, run
    if n == 0:
        return out_arr[:0]
    cur = v[0]
    run = 1
    for i in range(1, n):
        if v[i] == cur:
            run += 1
        else:
            out[j] = -cur
            j += 1
            if run > 1:
                out[j] = run
                j += 1
            cur = v[i]
            run = 1
    out[j] = -cur
    j += 1
    if run > 1:
        out[j] = run
        j += 1
    return out_arr[:j].copy()


def rle_decode(symbols, Py_ssize_t n):
    cdef const int64_t[::1] s = np.ascontiguousarray(symbols, dtype=np.int64)
    cdef Py_ssize_t m = s.shape[0], i = 0, j = 0, r
    out_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    cdef int64_t val, length
    if m == 0:
        if n:
            raise ValueError("empty run-length stream for non-empty group")
        return out_arr
    while i < m:
        if s[i] > 0:
            if i == 0:
                raise ValueError("run-length stream starts with a run length")
            raise ValueError("two consecutive run lengths")
        val = -s[i]
        i += 1
        length = 1
        if i < m and s[i] > 0:
            length = s[i]
            if length < 2:
                raise ValueError("stored run length below 2")
            i += 1
        if j + length > n:
            raise ValueError(f"run lengths exceed expected {n}")
        for r in range(length):
            out[j + r] = val
        j += length
    if j != n:
        raise ValueError(f"run lengths sum to {j}, expected {n}")
    return out_arr


def huffman_pack(idx, codes, lengths):
    cdef const int64_t[::1] ix = np.ascontiguousarray(idx, dtype=np.int64)
    cdef const uint64_t[::1] cd = np.ascontiguousarray(codes, dtype=np.uint64)
    cdef const int64_t[::1] ln = np.ascontiguousarray(lengths, dtype=np.int64)
    cdef Py_ssize_t n = ix.shape[0], i, total = 0, byte = 0
    cdef int64_t L, b
    cdef uint64_t code
    cdef int nbits = 0
    cdef uint8_t acc = 0
    for i in range(n):
        total += ln[ix[i]]
    out_arr = np.zeros((total + 7) // 8, dtype=np.uint8)
    cdef uint8_t[::1] out = out_arr
    for i in range(n):
        code = cd[ix[i]]
        L = ln[ix[i]]
        for b in range(L - 1, -1, -1):
            acc = (acc << 1) | <uint8_t>((code >> b) & 1)
            nbits += 1
            if nbits == 8:
                out[byte] = acc
                byte += 1
                acc = 0
                nbits = 0
    if nbits:
        out[byte] = acc << (8 - nbits)
    return out_arr.tobytes()


def huffman_unpack(data, Py_ssize_t n_symbols, first_code, counts, offsets, int max_len):
    cdef const uint8_t[::1] buf = np.frombuffer(data, dtype=np.uint8) if len(data) else np.zeros(0, dtype=np.uint8)
    cdef const int64_t[::1] fc = np.ascontiguousarray(first_code, dtype=np.int64)
    cdef const int64_t[::1] cnt = np.ascontiguousarray(counts, dtype=np.int64)
    cdef const int64_t[::1] off = np.ascontiguousarray(offsets, dtype=np.int64)
    cdef Py_ssize_t nbits = buf.shape[0] * 8, pos = 0, i
    cdef int64_t code, rel
    cdef int length
    out_arr = np.empty(n_symbols, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    for i in range(n_symbols):
        code = 0
        length = 0
        while True:
            if pos >= nbits:
                raise ValueError("bitstream exhausted")
            code = (code << 1) | ((buf[pos >> 3] >> (7 - (pos & 7))) & 1)
            pos += 1
            length += 1
            rel = code - fc[length]
            if 0 <= rel < cnt[length]:
                out[i] = off[length] + rel
                break
            if length >= max_len:
                raise ValueError("invalid code in bitstream")
    return out_arr


cdef inline Py_ssize_t _nearest(const double[::1] mids, Py_ssize_t nm, double x) nogil:
    # first mid >= x, i.e. searchsorted(mids, x, side="left")
    cdef Py_ssize_t lo = 0, hi = nm, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if mids[mid] < x:
            lo = mid + 1
        else:
            hi = mid
    return lo


def lloyd_step(points, weights, centers):
    cdef const double[::1] x = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] w = np.ascontiguousarray(weights, dtype=np.float64)
    c_arr = np.ascontiguousarray(centers, dtype=np.float64)
    cdef const double[::1] c = c_arr
    cdef Py_ssize_t k = c.shape[0], n = x.shape[0], i, lab
    mids_arr = (c_arr[1:] + c_arr[:-1]) * 0.5
    cdef const double[::1] mids = mids_arr
    sums_arr = np.zeros(k, dtype=np.float64)
    wsums_arr = np.zeros(k, dtype=np.float64)
    cdef double[::1] sums = sums_arr
    cdef double[::1] wsums = wsums_arr
    cdef double loss = 0.0, d, wd2, best = -1.0
    cdef Py_ssize_t far = -1
    with nogil:
        for i in range(n):
            lab = _nearest(mids, k - 1, x[i])
            d = x[i] - c[lab]
            wd2 = w[i] * d * d
            loss += wd2
            if wd2 > best:
                best = wd2
                far = i
            sums[lab] += w[i] * x[i]
            wsums[lab] += w[i]
    return sums_arr, wsums_arr, loss, far


def assign_nearest(points, centers):
    cdef const double[::1] x = np.ascontiguousarray(points, dtype=np.float64)
    c_arr = np.ascontiguousarray(centers, dtype=np.float64)
    mids_arr = (c_arr[1:] + c_arr[:-1]) * 0.5
    cdef const double[::1] mids = mids_arr
    cdef Py_ssize_t n = x.shape[0], i, nm = mids_arr.shape[0]
    out_arr = np.empty(n, dtype=np.int64)
    cdef int64_t[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = _nearest(mids, nm, x[i])
    return out_arr
