"""Compare the compiled and numpy nearest-neighbour backends.

    python benchmarks/bench_nn.py [--sizes 256 1024 4096 16384] [--repeat 3]

Prints one line per (size, method, backend) with the best wall time and
checks that both backends return identical indices.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from elastoreg.geometry import neighbors


def best_time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--sizes", type=int, nargs="+", default=[256, 1024, 4096, 16384])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = ["python"] + (["cython"] if neighbors._compiled is not None else [])
    if len(backends) == 1:
        print("compiled kernel not built; timing the numpy fallback only")
    rng = np.random.default_rng(args.seed)
    print(f"{'n':>7} {'method':>6} {'backend':>7} {'seconds':>10} {'speedup':>8}")
    for n in args.sizes:
        ref = rng.normal(size=(n, 3)) * 20.0
        query = rng.normal(size=(n, 3)) * 20.0
        methods = ["brute", "tree"] if n <= 4096 else ["tree"]
        for method in methods:
            times, results = {}, {}
            for be in backends:
                def run(be=be, method=method):
                    results[be] = neighbors.nearest_neighbors(query, ref, method=method,
                                                              backend=be)
                times[be] = best_time(run, args.repeat)
            if len(results) == 2:
                assert np.array_equal(results["python"][0], results["cython"][0])
            for be in backends:
                speed = times["python"] / times[be]
                print(f"{n:>7} {method:>6} {be:>7} {times[be]:>10.5f} {speed:>7.1f}x")


if __name__ == "__main__":
    main()
