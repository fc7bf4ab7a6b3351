"""Numba vs numpy kernel timings on the same inputs.

    python3 benchmarks/bench_kernels.py [--res 128] [--repeat 3]

Each row reports the best-of-N wall time per backend, the speedup and the
largest absolute difference between the two outputs.  The numba timings
exclude compilation (one warm-up call per kernel).
"""

import argparse
import time

import numpy as np

from moment_fields import metrics
from moment_fields.core import Camera, image_pixels, look_at
from moment_fields.nerf import VoxelField, make_batch, nerf_backward, render_batch
from moment_fields.splat import SplatScene, prepare, rasterize, splat_backward


def best_time(fn, repeat):
    fn()
    best = np.inf
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t)
    return best, out


def max_diff(a, b):
    if isinstance(a, dict):
        return max(max_diff(a[k], b[k]) for k in a)
    if isinstance(a, tuple):
        return max_diff(a[0], b[0])
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def cases(res, seed):
    rng = np.random.default_rng(seed)
    cam = Camera.centered(res, res, res * 1.1, look_at([0.3, -3.2, 0.9], [0, 0, 0]), 0.5, 7.0)
    px, py = image_pixels(cam)
    n = 2000
    scene = SplatScene(rng.uniform(-0.9, 0.9, (n, 3)), rng.uniform(0.02, 0.15, (n, 3)),
                       rng.normal(size=(n, 4)), rng.normal(0.5, 2.0, n), rng.random((n, 4)),
                       rng.random(4))
    frame = prepare(scene, cam)
    g_splat = rng.normal(size=(cam.n_pixels, 2, 5))
    field = VoxelField(rng.normal(0.0, 2.0, (32,) * 3), rng.random((32,) * 3 + (4,)),
                       -np.ones(3), np.ones(3))
    batch = make_batch(field, cam, px, py, 64, seed=seed)
    g_nerf = rng.normal(size=(cam.n_pixels, 2, 5))
    ranks = rng.permutation(200_000)
    return {
        "splat forward": lambda b: rasterize(frame, px, py, 2, backend=b)[0],
        "splat backward": lambda b: splat_backward(scene, cam, g_splat, frame=frame, backend=b),
        "nerf forward": lambda b: render_batch(field, batch, 2, backend=b)[0],
        "nerf backward": lambda b: nerf_backward(field, batch, g_nerf, backend=b),
        "kendall inversions": lambda b: (metrics._inversions_loop if b == "numba"
                                         else metrics._inversions_numpy)(ranks),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--res", type=int, default=128)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    print(f"{'kernel':<20}{'numba s':>10}{'numpy s':>10}{'speedup':>9}{'max |diff|':>12}")
    for name, run in cases(args.res, args.seed).items():
        t_numba, a = best_time(lambda: run("numba"), args.repeat)
        t_numpy, b = best_time(lambda: run("numpy"), args.repeat)
        print(f"{name:<20}{t_numba:>10.4f}{t_numpy:>10.4f}{t_numpy / t_numba:>9.1f}"
              f"{max_diff(a, b):>12.2e}")


if __name__ == "__main__":
    main()
