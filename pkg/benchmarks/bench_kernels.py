"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--n 1000000] [--repeat 5]
"""
import argparse
import sys
import time

import numpy as np

from qckpt.codec.entropy import build_table, huffman_encode
from qckpt.kernels import available_backends


def _best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def workloads(n, rng):
    # delta-like stream: mostly zeros with sparse changes
    deltas = np.where(rng.random(n) < 0.05, rng.integers(1, 18, n), 0).astype(np.int64)
    runs = None
    points = np.sort(rng.normal(size=n))
    weights = rng.random(n)
    centers = np.linspace(-2.5, 2.5, 32)
    # a real canonical table over a skewed alphabet
    symbols = np.minimum(rng.geometric(0.3, n // 4), 40)
    uniq, counts = np.unique(symbols, return_counts=True)
    table = build_table(uniq, counts)
    codes, lengths = table.codes(), table.lengths.astype(np.int64)
    rank = np.empty(uniq.size, dtype=np.int64)
    rank[np.searchsorted(uniq, table.symbols)] = np.arange(uniq.size)
    idx = rank[np.searchsorted(uniq, symbols)]
    first, cnt, offsets, max_len = table.decode_tables()
    packed = huffman_encode(symbols)[1]

    def rle(k):
        nonlocal runs
        runs = k.rle_encode(deltas)

    return {
        "rle_encode": (rle, None),
        "rle_decode": (lambda k: k.rle_decode(runs, n), rle),
        "huffman_pack": (lambda k: k.huffman_pack(idx, codes, lengths), None),
        "huffman_unpack": (lambda k: k.huffman_unpack(packed, idx.size, first, cnt, offsets, max_len), None),
        "lloyd_step": (lambda k: k.lloyd_step(points, weights, centers), None),
        "assign_nearest": (lambda k: k.assign_nearest(points, centers), None),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1_000_000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    backends = available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the python backend is available", file=sys.stderr)
    rng = np.random.default_rng(args.seed)
    jobs = workloads(args.n, rng)
    names = sorted(backends)
    print(f"{'kernel':<16}" + "".join(f"{b:>12}" for b in names) + (f"{'speedup':>10}" if len(names) > 1 else ""))
    for job, (fn, setup) in jobs.items():
        times = {}
        for b in names:
            k = backends[b]
            if setup is not None:
                setup(k)
            times[b] = _best_of(lambda: fn(k), args.repeat)
        row = f"{job:<16}" + "".join(f"{times[b] * 1e3:>10.2f}ms" for b in names)
        if len(names) > 1:
            row += f"{times['python'] / times['cython']:>9.1f}x"
        print(row)


if __name__ == "__main__":
    main()
