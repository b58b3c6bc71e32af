"""Time the compiled kernels against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Both backends are imported side by side, so one process compares them on
identical inputs and also checks that they agree.
"""
import argparse
import timeit

import numpy as np

from sipo import _purekernels as pure

try:
    from sipo import _kernels as compiled
except ImportError:
    compiled = None


def cases(rng):
    q, c = rng.normal(size=(4000, 8)), rng.normal(size=(256, 8))
    pts = rng.normal(size=(2000, 8))
    n = 4000
    r, v, nv = rng.normal(size=n), rng.normal(size=n), rng.normal(size=n)
    ends = rng.random(n) < 0.02
    return {
        "rbf_similarity 4000x256x8": lambda m: m.rbf_similarity(q, c, 0.02),
        "kth_neighbor_distances 2000x8 k=12": lambda m: m.kth_neighbor_distances(pts, 12),
        "gae n=4000": lambda m: m.gae(r, v, nv, ends, 0.997, 0.95),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<38}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in cases(rng).items():
        t_py = min(timeit.repeat(lambda: fn(pure), number=1, repeat=args.repeat)) * 1e3
        if compiled is None:
            print(f"{name:<38}{t_py:12.2f}{'n/a':>12}{'':>10}")
            continue
        diff = np.max(np.abs(np.asarray(fn(pure)) - np.asarray(fn(compiled))))
        t_cy = min(timeit.repeat(lambda: fn(compiled), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<38}{t_py:12.2f}{t_cy:12.2f}{t_py / t_cy:9.1f}x   max|diff| {diff:.1e}")
    if compiled is None:
        print("compiled extension not built; only the fallback was timed")


if __name__ == "__main__":
    main()
