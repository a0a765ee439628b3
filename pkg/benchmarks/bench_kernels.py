#!/usr/bin/env python
"""Time the numba kernels against their pure-numpy fallbacks.

Kernels compared:
    MMD value + gradients (transfer loss hot path)
    per-query AP and 11-point PR curves (retrieval hot path)

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --sizes 32 128 512 --repeats 5
    python benchmarks/bench_kernels.py --output bench.json
"""

import argparse
import json
import time

import numpy as np

from mhtn import kernels
from mhtn._accel import NUMBA_AVAILABLE


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def mmd_case(n, dim, rng):
    a, b = rng.normal(size=(n, dim)), rng.normal(size=(n, dim))
    gammas = np.array([0.5, 0.125, 0.03125])
    weights = np.full(3, 1 / 3)
    return (a, b, gammas, weights), kernels.mmd2_grad_numba, kernels.mmd2_grad_numpy


def rank_case(n, classes, rng):
    sims = rng.random((n, n))
    ql, gl = rng.integers(0, classes, n), rng.integers(0, classes, n)
    return (sims, ql, gl, kernels.PR_LEVELS), kernels.rank_metrics_numba, kernels.rank_metrics_numpy


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[32, 128, 512])
    parser.add_argument("--dim", type=int, default=128)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--output", help="write results as JSON")
    args = parser.parse_args()

    if not NUMBA_AVAILABLE:
        print("numba is not importable; nothing to compare")
        return

    rng = np.random.default_rng(args.seed)
    rows = []
    print(f"{'kernel':<8} {'n':>6} {'numba ms':>10} {'numpy ms':>10} {'speedup':>8}")
    for n in args.sizes:
        for name, build in (("mmd", lambda: mmd_case(n, args.dim, rng)), ("rank", lambda: rank_case(n, 10, rng))):
            call_args, fast, slow = build()
            fast(*call_args)  # compile outside the timed region
            t_fast = best_of(lambda: fast(*call_args), args.repeats)
            t_slow = best_of(lambda: slow(*call_args), args.repeats)
            rows.append({"kernel": name, "n": n, "numba_s": t_fast, "numpy_s": t_slow, "speedup": t_slow / t_fast})
            print(f"{name:<8} {n:>6} {t_fast * 1e3:>10.3f} {t_slow * 1e3:>10.3f} {t_slow / t_fast:>7.1f}x")

    if args.output:
        with open(args.output, "w") as fh:
            json.dump({"dim": args.dim, "repeats": args.repeats, "results": rows}, fh, indent=2)


if __name__ == "__main__":
    main()
