#!/usr/bin/env python3
"""Benchmark the compiled vs pure-python blending kernels.

Usage: python benchmarks/bench_kernels.py [--n 20000] [--size 64] [--reps 10]
"""

import argparse
import time

import numpy as np

from ensplat.gaussians import Camera, GaussianField
from ensplat.rasterizer import kernels, render, render_backward
from ensplat.rasterizer.render import TILE_SIZE, _bin_tiles, _project_visible


def timeit(fn, reps):
    fn()
    times = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return np.median(times) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20000)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--threads", type=int, default=2)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    fld = GaussianField(
        mu=rng.normal(0, 0.5, (args.n, 3)),
        log_scale=rng.normal(-3.2, 0.3, (args.n, 3)),
        rot=rng.normal(0, 1, (args.n, 4)),
        sh=rng.normal(0, 0.2, (args.n, 12)),
        opacity_logit=rng.normal(-0.5, 1.0, args.n),
        sh_degree=1, dtype=np.float32)
    cam = Camera.orbit(30, 20, 3.0, width=args.size, height=args.size,
                       focal=args.size * 0.9)
    arrays = fld.attribute_arrays()
    proj = _project_visible(arrays, 1, cam, np.float32)
    inst_src, tile_ranges, tiles_x = _bin_tiles(proj, args.size, args.size)
    gather = lambda a: np.ascontiguousarray(a[inst_src])
    inst = (gather(proj["mean2d"]), gather(proj["conic"]), gather(proj["color"]),
            gather(proj["opacity"]))
    print(f"N={args.n} size={args.size} instances={inst_src.size} "
          f"active_backend={kernels.BACKEND}")

    backends = [("python", kernels.get_backend("python"))]
    try:
        backends.insert(0, ("cython", kernels.get_backend("cython")))
    except ImportError:
        print("compiled backend unavailable; benchmarking fallback only")

    H = W = args.size
    bg = np.ones(3, dtype=np.float32)
    grad = np.ones((H, W, 3), dtype=np.float32)
    for name, backend in backends:
        rgb = np.zeros((H, W, 3), dtype=np.float32)
        t = np.zeros((H, W), dtype=np.float32)
        last = np.zeros((H, W), dtype=np.int64)

        def fwd():
            backend.blend_forward(*inst, tile_ranges, tiles_x, TILE_SIZE, W, H,
                                  bg, rgb, t, last, args.threads)

        fwd_ms = timeit(fwd, args.reps)
        gi = np.zeros((inst_src.size, 9), dtype=np.float32)

        def bwd():
            gi[:] = 0
            backend.blend_backward(*inst, tile_ranges, tiles_x, TILE_SIZE, W, H,
                                   bg, t, last, grad, gi, args.threads)

        bwd_ms = timeit(bwd, max(1, args.reps // 2))
        print(f"{name:8s} blend_forward {fwd_ms:8.2f} ms   blend_backward {bwd_ms:8.2f} ms")

    def full():
        fb = render(fld, cam, with_cache=True, n_threads=args.threads)
        render_backward(fb.cache, grad.astype(fld.mu.data.dtype), n_threads=args.threads)

    print(f"full render+backward ({kernels.BACKEND}): {timeit(full, args.reps):.2f} ms")


if __name__ == "__main__":
    main()
