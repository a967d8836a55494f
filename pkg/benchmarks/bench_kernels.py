#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy reference backend.

Covers the two hot paths selected at import by triforge.kernels: row
scatter-add and the soft rasterizer (forward + backward) on a realistic
training-scale scene (marching-tets sphere at grid 48, rendered at 128^2).

Usage: python benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import time

import numpy as np

from triforge.kernels import reference

try:
    from triforge.kernels import _fastcore
except ImportError:
    _fastcore = None

import triforge.tetmesh as tet
from triforge.render import Camera, project
import triforge.autodiff as ad


def timeit(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_scatter(backend, repeat):
    rng = np.random.default_rng(0)
    idx = rng.integers(0, 4096, 2_000_000)
    src = rng.standard_normal((2_000_000, 8))
    out = np.zeros((4096, 8))
    return timeit(lambda: backend.scatter_add_rows(out, idx, src), repeat)


def make_scene():
    g = tet.build_grid(48)
    s = np.linalg.norm(g.verts, axis=1) - 0.6
    mesh = tet.marching_tets(g, tet.VertexFields(sdf=s, deform=np.zeros((len(s), 3))))
    cam = Camera(eye=np.array([2.3, 0.4, 0.3]), resolution=(128, 128), fov_y=np.deg2rad(40))
    with ad.no_grad():
        ndc, z = project(mesh.vertices_np, cam)
    tau = 1e-4
    radius = 4.0 * np.sqrt(tau) + 2.0 / 128
    args = (ndc.data, z.data, np.ascontiguousarray(mesh.faces), 128, 128,
            tau, 0.1, cam.far, 1e-3, radius)
    return args


def bench_softras(backend, repeat):
    args = make_scene()
    fwd = backend.softras_forward(*args)
    rng = np.random.default_rng(1)
    gm = rng.standard_normal((128, 128))
    gd = rng.standard_normal((128, 128))
    t_f = timeit(lambda: backend.softras_forward(*args), repeat)
    t_b = timeit(lambda: backend.softras_backward(*args, *fwd[2:], gm, gd), repeat)
    return t_f, t_b


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    rows = []
    for name, backend in [("python", reference)] + ([("compiled", _fastcore)] if _fastcore else []):
        t_scatter = bench_scatter(backend, args.repeat)
        t_fwd, t_bwd = bench_softras(backend, args.repeat)
        rows.append((name, t_scatter, t_fwd, t_bwd))

    print(f"{'backend':<10} {'scatter_add_rows':>17} {'softras fwd':>13} {'softras bwd':>13}")
    for name, ts, tf, tb in rows:
        print(f"{name:<10} {ts * 1e3:>14.1f} ms {tf * 1e3:>10.1f} ms {tb * 1e3:>10.1f} ms")
    if len(rows) == 2:
        print(
            f"{'speedup':<10} {rows[0][1] / rows[1][1]:>15.1f}x "
            f"{rows[0][2] / rows[1][2]:>11.1f}x {rows[0][3] / rows[1][3]:>11.1f}x"
        )


if __name__ == "__main__":
    main()
