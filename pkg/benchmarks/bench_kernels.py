#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy fallback.

Times each hot kernel on render-scale inputs, then one full volume render
through the public API per backend (by swapping the dispatch table), and
prints a speedup table.

    python3 benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

import tricast._kernels as K
from tricast._kernels import _fallback

try:
    from tricast._kernels import _core
except ImportError:
    _core = None


def best_ms(fn, repeats: int) -> float:
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def kernel_cases():
    """(name, args) at the shapes one desk-scale render step produces."""
    rng = np.random.default_rng(0)
    n, d = 200_000, 8                     # rays x samples texel lookups
    plane = np.ascontiguousarray(rng.normal(size=(16, 16, d)))
    x = np.ascontiguousarray(rng.uniform(0, 15, n))
    y = np.ascontiguousarray(rng.uniform(0, 15, n))
    gout_b = np.ascontiguousarray(rng.normal(size=(n, d)))

    r, s = 4096, 48                       # one 64x64 image of rays
    sigma = np.ascontiguousarray(rng.uniform(0, 4, (r, s)))
    rgb = np.ascontiguousarray(rng.uniform(0, 1, (r, s, 3)))
    delta = np.ascontiguousarray(rng.uniform(0.01, 0.05, (r, s)))
    tmid = np.ascontiguousarray(np.cumsum(delta, axis=1))
    bg = np.ones(3)
    gout_c = np.ascontiguousarray(rng.normal(size=(r, 5)))

    gx = rng.normal(size=(64, 64))
    gy = rng.normal(size=(64, 64))
    mag = np.hypot(gx, gy)
    strong = np.ascontiguousarray((rng.random((64, 64)) > 0.95)
                                  .astype(np.uint8))
    weak = np.ascontiguousarray((rng.random((64, 64)) > 0.4)
                                .astype(np.uint8))
    return [
        ("bilinear_forward", (plane, x, y)),
        ("bilinear_backward", (plane, x, y, gout_b)),
        ("composite_forward", (sigma, rgb, delta, tmid, bg)),
        ("composite_backward", (sigma, rgb, delta, tmid, bg, gout_c)),
        ("canny_nms", (np.ascontiguousarray(mag),
                       np.ascontiguousarray(gx), np.ascontiguousarray(gy))),
        ("canny_hysteresis", (strong, weak)),
    ]


_DISPATCH_NAMES = ("bilinear_forward", "bilinear_backward",
                   "composite_forward", "composite_backward",
                   "canny_nms", "canny_hysteresis")


def timed_render(impl, repeats: int) -> float:
    """Full 32x32 volume render with the given kernel module patched in."""
    from tricast.camera import look_at
    from tricast.tensor import Tensor, no_tape
    from tricast.triplane import Triplane, init_nerf_decoder, render_image

    saved = {n: getattr(K, n) for n in _DISPATCH_NAMES}
    for n in _DISPATCH_NAMES:
        setattr(K, n, getattr(impl, n))
    try:
        rng = np.random.default_rng(0)
        planes = Triplane(*(Tensor(rng.normal(0, 0.3, (16, 16, 8))
                                   .astype(np.float32)) for _ in range(3)))
        params = init_nerf_decoder(rng, d_in=24, hidden=32)
        pose = look_at((0.0, 0.5, 2.2), (0.0, 0.0, 0.0),
                       foc_x=1.1, foc_y=1.1)

        def run():
            with no_tape():
                render_image(planes, pose, 32, 32, n_samples=48,
                             params=params)

        run()                              # warm up
        return best_ms(run, repeats)
    finally:
        for n, fn in saved.items():
            setattr(K, n, fn)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()

    print(f"active backend at import: {K.BACKEND}")
    if _core is None:
        print("compiled core not built; timing the numpy fallback only\n")
    rows = []
    for name, call_args in kernel_cases():
        t_np = best_ms(lambda: getattr(_fallback, name)(*call_args),
                       args.repeats)
        if _core is not None:
            t_cy = best_ms(lambda: getattr(_core, name)(*call_args),
                           args.repeats)
            rows.append((name, t_np, t_cy))
        else:
            rows.append((name, t_np, None))

    t_np = timed_render(_fallback, args.repeats)
    t_cy = timed_render(_core, args.repeats) if _core is not None else None
    rows.append(("volume render 32x32x48", t_np, t_cy))

    width = max(len(r[0]) for r in rows)
    print(f"{'kernel':<{width}}  {'numpy ms':>9}  {'cython ms':>9}  speedup")
    for name, a, b in rows:
        if b is None:
            print(f"{name:<{width}}  {a:9.3f}  {'-':>9}  -")
        else:
            print(f"{name:<{width}}  {a:9.3f}  {b:9.3f}  {a / b:6.2f}x")


if __name__ == "__main__":
    main()
