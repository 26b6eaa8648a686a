"""Time the numba and numpy kernel backends on matching and overlap counting.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from concat_lab import _accel
from concat_lab.matching import solve_assignment
from concat_lab.metrics import pair_counts


def cases(rng):
    costs = [rng.random((o, 12)) for o in range(1, 5) for _ in range(50)]
    big = [rng.random((40, 60)) for _ in range(5)]
    maps = [(rng.integers(0, 5, (32, 32)), rng.integers(0, 7, (32, 32))) for _ in range(100)]
    return {
        "hungarian 4x12 (200 matrices)": lambda b: [solve_assignment(c, b) for c in costs],
        "hungarian 40x60 (5 matrices)": lambda b: [solve_assignment(c, b) for c in big],
        "pair_counts 32x32 (100 maps)": lambda b: [pair_counts(x, y, 5, 7, b) for x, y in maps],
    }


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = ["numpy"] + (["numba"] if _accel.NUMBA_AVAILABLE else [])
    rng = np.random.default_rng(0)
    print(f"{'case':<32}" + "".join(f"{b:>12}" for b in backends) + "   (best of repeats, ms)")
    for name, fn in cases(rng).items():
        for b in backends:
            fn(b)  # warm up / compile
        times = [min(timeit.repeat(lambda: fn(b), number=1, repeat=args.repeat)) * 1e3 for b in backends]
        print(f"{name:<32}" + "".join(f"{t:12.2f}" for t in times))


if __name__ == "__main__":
    main()
