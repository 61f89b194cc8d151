"""Time the face rasterizer on its numba and numpy paths.

    python3 benchmarks/bench_render.py --faces 40 --resolution 64

Both paths render the same scenes; the script also reports the largest
per-pixel difference between them (expected to be exactly zero).
"""
import argparse
import time

import numpy as np

from fsiad import _kernels
from fsiad.dataio import SUPERSAMPLE, AttributeSpec, SubjectSpec, background_rgb, face_scene


def scenes(n: int, seed: int):
    out = []
    for i in range(n):
        subject = SubjectSpec.from_seed(seed, i)
        attr = AttributeSpec.from_seed(seed, i, 0)
        prims, colors = face_scene(subject, attr)
        out.append((prims, colors, np.asarray(background_rgb(attr))))
    return out


def time_path(fn, work, res, repeats):
    best = float("inf")
    images = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        images = [fn(p, c, bg, res, SUPERSAMPLE) for p, c, bg in work]
        best = min(best, time.perf_counter() - t0)
    return best, images


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--faces", type=int, default=40)
    ap.add_argument("--resolution", type=int, default=64, choices=(32, 64, 128))
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = scenes(args.faces, args.seed)
    t_np, img_np = time_path(_kernels.rasterize_numpy, work, args.resolution, args.repeats)
    print(f"numpy : {t_np:8.3f} s  ({1e3 * t_np / args.faces:.2f} ms/face)")
    if _kernels.rasterize_numba is None:
        print("numba : not installed")
        return
    t0 = time.perf_counter()
    _kernels.rasterize_numba(*work[0], args.resolution, SUPERSAMPLE)
    print(f"numba first call (compile or cache load): {time.perf_counter() - t0:.3f} s")
    t_nb, img_nb = time_path(_kernels.rasterize_numba, work, args.resolution, args.repeats)
    print(f"numba : {t_nb:8.3f} s  ({1e3 * t_nb / args.faces:.2f} ms/face)")
    diff = max(float(np.abs(a - b).max()) for a, b in zip(img_np, img_nb))
    print(f"speedup {t_np / t_nb:.2f}x, max abs difference {diff:.3g}")


if __name__ == "__main__":
    main()
