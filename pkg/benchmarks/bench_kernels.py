#!/usr/bin/env python3
"""Timing comparison of the numba kernels against the pure-numpy fallback.

Run:  python benchmarks/bench_kernels.py [--repeat 5]

Imports both backend modules directly (ignoring VGFM_BACKEND) so one process
can time the pair side by side. The numba column includes a warm-up call so
JIT compilation is not measured.
"""

import argparse
import time

import numpy as np

from vgfm.kernels import _numpy as np_impl

try:
    from vgfm.kernels import _numba as nb_impl
except ImportError:
    nb_impl = None


def bench(fn, args, repeat):
    fn(*args)  # warm-up (compiles numba kernels)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    rng = np.random.default_rng(0)
    data = np.ascontiguousarray(rng.standard_normal((48, 48, 32)))
    n = 4000
    xs = rng.uniform(0, 47, n)
    ys = rng.uniform(0, 47, n)
    rects = np.stack(
        [
            (lambda x1, y1: np.array([x1, y1, x1 + rng.uniform(4, 20), y1 + rng.uniform(4, 20)]))(
                rng.uniform(0, 25), rng.uniform(0, 25)
            )
            for _ in range(256)
        ]
    )
    grads = rng.standard_normal((256, 32))
    ref = rng.standard_normal(32)
    points = rng.standard_normal((5000, 32))
    centers = rng.standard_normal((16, 32))

    cases = [
        ("bilinear_many (4k pts)", "bilinear_many", (data, xs, ys)),
        ("roi_align_many (256 boxes, bins=7)", "roi_align_many", (data, rects, 7)),
        ("roi_align_scatter (256 boxes)", "roi_align_scatter", (48, 48, 32, rects, 7, grads)),
        ("cosine_map (48x48x32)", "cosine_map", (data, ref)),
        ("pairwise_sqdist (5k x 16)", "pairwise_sqdist", (points, centers)),
    ]

    print(f"{'kernel':38s} {'numpy':>10s} {'numba':>10s} {'speedup':>8s}")
    for label, name, call_args in cases:
        t_np = bench(getattr(np_impl, name), call_args, args.repeat)
        if nb_impl is None:
            print(f"{label:38s} {t_np * 1e3:9.2f}ms {'n/a':>10s}")
            continue
        t_nb = bench(getattr(nb_impl, name), call_args, args.repeat)
        print(
            f"{label:38s} {t_np * 1e3:9.2f}ms {t_nb * 1e3:9.2f}ms {t_np / t_nb:7.1f}x"
        )


if __name__ == "__main__":
    main()
