#!/usr/bin/env python3
"""Timing and equivalence comparison of the two kernel implementations.

Every hot kernel ships as a pure-numpy vectorized function and an
explicit-loop version compiled with numba (selected at import time via the
MFL_NO_NUMBA environment variable).  This script benchmarks both paths in a
single run, independent of that flag, and verifies the outputs agree on
shared random inputs: bitwise for integer/boolean kernels, to within 1e-14
for the float-valued one.

Usage: python3 benchmarks/bench_kernels.py [--n 512] [--repeats 20]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from milliflow import _kernels as K

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


def best_of(fn, args, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(n: int):
    rng = np.random.default_rng(0)
    points = rng.normal(0.0, 1.0, (n, 3))
    ref = rng.normal(0.0, 1.0, (n, 3))
    seg_a = rng.normal(0.0, 1.0, (13, 3))
    seg_b = seg_a + rng.normal(0.0, 0.3, (13, 3))
    heatmap = np.abs(rng.normal(0.0, 1.0, (302, 20, 16)))
    heatmap_flat = np.ascontiguousarray(heatmap.reshape(302, -1))
    return [
        ("knn_indices", K.knn_indices_np, K._knn_indices_loop,
         (points, ref, 8), (points, ref, 8), 0.0),
        ("ball_query", K.ball_query_np, K._ball_query_loop,
         (points, ref, 0.5, 16), (points, ref, 0.5, 16), 0.0),
        ("farthest_point_sample", K.farthest_point_sample_np, K._fps_loop,
         (points, max(1, n // 4), 0), (points, max(1, n // 4), 0), 0.0),
        ("point_segment_distances", K.point_segment_distances_np,
         K._point_segment_distances_loop,
         (points, seg_a, seg_b), (points, seg_a, seg_b), 1e-14),
        ("cfar_mask", K.cfar_mask_np, K._cfar_mask_loop,
         (heatmap, 8, 6, 5.0), (heatmap_flat, 8, 6, 5.0), 0.0),
    ]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=512, help="point count")
    parser.add_argument("--repeats", type=int, default=20)
    args = parser.parse_args()

    print(f"n = {args.n}, repeats = {args.repeats} (best-of timing)")
    print(f"numba available: {HAS_NUMBA}")
    header = f"{'kernel':<26} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}  agreement"
    print(header)
    print("-" * len(header))

    for name, np_fn, loop_fn, np_args, loop_args, tol in build_cases(args.n):
        out_np = np_fn(*np_args)
        t_np = best_of(np_fn, np_args, args.repeats)
        if HAS_NUMBA:
            jit_fn = njit(cache=True)(loop_fn)
            loop_args = tuple(np.ascontiguousarray(a, dtype=np.float64)
                              if isinstance(a, np.ndarray) else a
                              for a in loop_args)
            out_jit = jit_fn(*loop_args)
            t_jit = best_of(jit_fn, loop_args, args.repeats)
            if name == "cfar_mask":  # loop variant works on the flattened view
                out_jit = out_jit.reshape(out_np.shape)
            if tol == 0.0:
                ok = bool(np.array_equal(out_np, out_jit))
                agreement = "bitwise" if ok else "DIFFER"
            else:
                err = float(np.max(np.abs(out_np - out_jit)))
                ok = err <= tol
                agreement = f"max |d|={err:.1e}" if ok else f"DIFFER ({err:.1e})"
            print(f"{name:<26} {t_np * 1e3:>10.3f} {t_jit * 1e3:>10.3f} "
                  f"{t_np / t_jit:>8.2f}x  {agreement}")
            if not ok:
                raise SystemExit(f"kernel {name}: implementations disagree")
        else:
            print(f"{name:<26} {t_np * 1e3:>10.3f} {'-':>10} {'-':>8}  -")

    print("all kernels agree" if HAS_NUMBA
          else "numba unavailable: timed the numpy path only")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
