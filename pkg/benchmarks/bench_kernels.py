"""Benchmark the jitted kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--nodes 400] [--dim 128] [--reps 50]

Sizes default to what one training step of the desk pipeline sees. The
numba path must be importable; set HSTG_NUMBA=0 to verify the fallback
selection instead (the script then reports numpy twice).
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from hstgmatch import kernels


def lattice_csr(rows: int, cols: int):
    n = rows * cols
    indptr = [0]
    nbr = []
    for i in range(n):
        r, c = divmod(i, cols)
        block = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols:
                    block.append(rr * cols + cc)
        nbr.extend(sorted(block))
        indptr.append(len(nbr))
    return np.array(indptr, dtype=np.int64), np.array(nbr, dtype=np.int64)


def timeit(fn, reps: int) -> float:
    fn()  # warm up (JIT compile on the numba path)
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    parser = argparse.ArgumentParser(description="kernel backend benchmark")
    parser.add_argument("--nodes", type=int, default=400)
    parser.add_argument("--dim", type=int, default=128)
    parser.add_argument("--points", type=int, default=20000)
    parser.add_argument("--segments", type=int, default=480)
    parser.add_argument("--reps", type=int, default=50)
    args = parser.parse_args()

    side = int(np.sqrt(args.nodes))
    indptr, nbr = lattice_csr(side, side)
    n = indptr.shape[0] - 1
    rng = np.random.default_rng(0)
    u = rng.normal(size=(n, args.dim))
    g = rng.normal(size=(n, args.dim))
    inv = 1.0 / np.sqrt(args.dim)
    centers = np.repeat(np.arange(n), np.diff(indptr))
    w = rng.random(nbr.shape[0])
    px = rng.uniform(0, 2000, size=args.points)
    py = rng.uniform(0, 2000, size=args.points)
    segs = rng.uniform(0, 2000, size=(args.segments, 4))

    print(f"active backend: {kernels.backend()}  "
          f"(nodes={n}, edges={nbr.shape[0]}, dim={args.dim})")
    header = f"{'kernel':34s} {'numpy':>12s} {'active':>12s} {'speedup':>9s}"
    print(header)
    print("-" * len(header))

    alpha = kernels.numpy_impls["edge_attention_forward"](u, indptr, nbr, inv)[1]
    cases = [
        ("edge_attention_forward",
         lambda f: f(u, indptr, nbr, inv)),
        ("edge_attention_backward",
         lambda f: f(u, indptr, nbr, alpha, g, inv)),
        ("scatter_weighted",
         lambda f: f(u, nbr, centers, w, n)),
        ("nearest_segments",
         lambda f: f(px, py, segs)),
    ]
    for name, call in cases:
        t_np = timeit(lambda: call(kernels.numpy_impls[name]), args.reps)
        t_ac = timeit(lambda: call(kernels.active_impls[name]), args.reps)
        print(f"{name:34s} {t_np * 1e3:10.3f}ms {t_ac * 1e3:10.3f}ms "
              f"{t_np / t_ac:8.1f}x")


if __name__ == "__main__":
    main()
