"""Benchmark the compiled kernels against the pure-numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeats N]
"""

import argparse
import time

import numpy as np

from segstack._ext import _fallback

try:
    from segstack._ext import _core
except ImportError:
    _core = None


def best_of(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def bench_patch_moments(repeats):
    rng = np.random.default_rng(0)
    cases = [
        ("64x64x1  r1", rng.random((1, 64, 64), dtype=np.float32), 1),
        ("64x64x10 r1", rng.random((10, 64, 64), dtype=np.float32), 1),
        ("256x256x3 r2", rng.random((3, 256, 256), dtype=np.float32), 2),
    ]
    for label, data, radius in cases:
        t_fb = best_of(lambda: _fallback.patch_moments(data, radius), repeats)
        if _core is None:
            yield f"patch_moments {label}", t_fb, None
        else:
            t_c = best_of(lambda: _core.patch_moments(data, radius), repeats)
            yield f"patch_moments {label}", t_fb, t_c


def bench_directed_distance(repeats):
    rng = np.random.default_rng(1)
    for na, nb in ((500, 2000), (2000, 8000), (5000, 40000)):
        a = rng.integers(0, 1024, (na, 2)).astype(np.float64)
        b = rng.integers(0, 1024, (nb, 2)).astype(np.float64)
        t_fb = best_of(lambda: _fallback.directed_avg_distance(a, b), repeats)
        if _core is None:
            yield f"directed_avg_distance {na}x{nb}", t_fb, None
        else:
            t_c = best_of(lambda: _core.directed_avg_distance(a, b), repeats)
            yield f"directed_avg_distance {na}x{nb}", t_fb, t_c


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=3)
    args = parser.parse_args()

    if _core is None:
        print("compiled extension not built; timing fallback only\n")
    rows = []
    for gen in (bench_patch_moments, bench_directed_distance):
        rows.extend(gen(args.repeats))

    width = max(len(name) for name, _, _ in rows)
    print(f"{'kernel'.ljust(width)}  {'fallback':>10}  {'compiled':>10}  {'speedup':>8}")
    for name, t_fb, t_c in rows:
        if t_c is None:
            print(f"{name.ljust(width)}  {t_fb * 1e3:>8.2f}ms  {'-':>10}  {'-':>8}")
        else:
            print(f"{name.ljust(width)}  {t_fb * 1e3:>8.2f}ms  {t_c * 1e3:>8.2f}ms"
                  f"  {t_fb / t_c:>7.1f}x")


if __name__ == "__main__":
    main()
