"""Compare the compiled selection kernels with the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
Prints one row per (kernel, shape) with the best-of-N time for each backend
and the speedup, after checking that both return identical indices.
"""
import argparse
import timeit

import numpy as np

from gaprompt.pointops import compiled_kernels, python_kernels

CASES = [
    # (batch, points, dims, selected), dims 96 mimics token-space FPS
    (16, 256, 3, 32),
    (16, 276, 3, 32),
    (16, 32, 96, 16),
    (8, 2048, 3, 128),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if compiled_kernels is None:
        raise SystemExit("compiled kernels are not built; run: pip install -e . --no-build-isolation")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<6} {'B x N x d -> m':<22} {'cython ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for b, n, d, m in CASES:
        pts = rng.normal(size=(b, n, d))
        starts = rng.integers(0, n, size=b)
        centers = pts[:, :m]
        jobs = {
            "fps": (lambda mod: mod.fps_batch(pts, m, starts)),
            "knn": (lambda mod: mod.knn_batch(centers, pts, min(16, n))),
        }
        for name, job in jobs.items():
            if not np.array_equal(job(compiled_kernels), job(python_kernels)):
                raise SystemExit(f"{name}: backends disagree on {b}x{n}x{d}")
            fast = bench(lambda: job(compiled_kernels), args.repeat)
            slow = bench(lambda: job(python_kernels), args.repeat)
            print(f"{name:<6} {f'{b}x{n}x{d} -> {m}':<22} {fast * 1e3:>10.2f} {slow * 1e3:>10.2f} {slow / fast:>7.1f}x")


if __name__ == "__main__":
    main()
