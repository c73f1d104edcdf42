"""Benchmark the numba kernels against the pure-numpy/python fallback.

Runs each hot kernel on both backends and prints a timing table. The backend
is selected per call through PANELPIPE_DISABLE_NUMBA, the same flag the
package honors at runtime.

    python benchmarks/bench_kernels.py --rows 200000 --names 400
"""

import argparse
import os
import time

import numpy as np

from panelpipe import kernels


def time_call(fn, repeats=3):
    best = float("inf")
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def bench_demean(rows, cols, factors, sweeps_data=None):
    rng = np.random.default_rng(0)
    values = rng.normal(size=(rows, cols))
    codes = [rng.integers(0, max(rows // 50, 2), rows) for _ in range(factors)]
    return lambda: kernels.demean(values, codes)


def bench_levenshtein(n_names):
    rng = np.random.default_rng(1)
    alphabet = list("abcdefghijklmnopqrstuvwxyz ")
    names = ["".join(rng.choice(alphabet, size=rng.integers(5, 16))) for _ in range(n_names)]
    refs = ["".join(rng.choice(alphabet, size=rng.integers(5, 16))) for _ in range(80)]

    def run():
        for name in names:
            for ref in refs:
                kernels.similarity(name, ref)

    return run


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=200_000)
    parser.add_argument("--cols", type=int, default=2)
    parser.add_argument("--factors", type=int, default=2)
    parser.add_argument("--names", type=int, default=300)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    cases = {
        f"demean {args.rows}x{args.cols}, {args.factors} factors":
            bench_demean(args.rows, args.cols, args.factors),
        f"levenshtein {args.names} names x 80 refs":
            bench_levenshtein(args.names),
    }

    print(f"{'kernel':<44}{'numba (s)':>12}{'numpy (s)':>12}{'speedup':>10}")
    for label, fn in cases.items():
        os.environ.pop("PANELPIPE_DISABLE_NUMBA", None)
        if kernels.numba_enabled():
            fn()  # compile before timing
            with_numba = time_call(fn, args.repeats)
        else:
            with_numba = float("nan")
        os.environ["PANELPIPE_DISABLE_NUMBA"] = "1"
        without = time_call(fn, args.repeats)
        os.environ.pop("PANELPIPE_DISABLE_NUMBA", None)
        ratio = without / with_numba if with_numba == with_numba else float("nan")
        print(f"{label:<44}{with_numba:>12.4f}{without:>12.4f}{ratio:>9.1f}x")


if __name__ == "__main__":
    main()
