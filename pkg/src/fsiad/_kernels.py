"""Supersampled painter's-algorithm rasterizer.

Two interchangeable paths: a numba ``@njit`` kernel and a vectorised numpy
fallback. Set ``FSIAD_NUMBA=0`` to force the numpy path. Both accumulate
subsamples in the same order and produce bit-identical output.

Primitive rows (all coordinates in [-1, 1], x right, y down)::

    [kind, cx, cy, a, b, cos, sin, k, t]

kind 0 -- filled ellipse, semi-axes (a, b), rotated by (cos, sin)
kind 1 -- parabolic stroke: |u| <= a and |v - k u^2| <= t in the rotated frame
"""
from __future__ import annotations

import os

import numpy as np

ELLIPSE = 0
STROKE = 1
PRIM_FIELDS = 9


def _numba_requested() -> bool:
    return os.environ.get("FSIAD_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")


try:
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba ships with the test environment
    HAVE_NUMBA = False


def rasterize_numpy(prims, colors, background, res, ss):
    prims = np.ascontiguousarray(prims, dtype=np.float64)
    colors = np.ascontiguousarray(colors, dtype=np.float64)
    n = res * ss
    centers = (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0
    y, x = np.meshgrid(centers, centers, indexing="ij")
    canvas = np.empty((n, n, 3), dtype=np.float64)
    canvas[:] = np.asarray(background, dtype=np.float64)
    for p in range(prims.shape[0]):
        kind, cx, cy, a, b, c, s, k, t = prims[p]
        dx = x - cx
        dy = y - cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        if kind == ELLIPSE:
            ua = u / a
            vb = v / b
            inside = ua * ua + vb * vb <= 1.0
        else:
            inside = (np.abs(u) <= a) & (np.abs(v - k * u * u) <= t)
        canvas[inside] = colors[p]
    out = np.zeros((res, res, 3), dtype=np.float64)
    for sy in range(ss):
        for sx in range(ss):
            out += canvas[sy::ss, sx::ss]
    return out / (ss * ss)


def _rasterize_loop(prims, colors, background, res, ss):
    n = res * ss
    out = np.zeros((res, res, 3), dtype=np.float64)
    col = np.empty(3, dtype=np.float64)
    for sy in range(ss):
        for sx in range(ss):
            for i in range(res):
                y = (i * ss + sy + 0.5) / n * 2.0 - 1.0
                for j in range(res):
                    x = (j * ss + sx + 0.5) / n * 2.0 - 1.0
                    col[0] = background[0]
                    col[1] = background[1]
                    col[2] = background[2]
                    for p in range(prims.shape[0]):
                        cx = prims[p, 1]
                        cy = prims[p, 2]
                        a = prims[p, 3]
                        b = prims[p, 4]
                        c = prims[p, 5]
                        s = prims[p, 6]
                        dx = x - cx
                        dy = y - cy
                        u = c * dx + s * dy
                        v = -s * dx + c * dy
                        if prims[p, 0] == 0.0:
                            ua = u / a
                            vb = v / b
                            inside = ua * ua + vb * vb <= 1.0
                        else:
                            inside = abs(u) <= a and abs(v - prims[p, 7] * u * u) <= prims[p, 8]
                        if inside:
                            col[0] = colors[p, 0]
                            col[1] = colors[p, 1]
                            col[2] = colors[p, 2]
                    out[i, j, 0] += col[0]
                    out[i, j, 1] += col[1]
                    out[i, j, 2] += col[2]
    return out / (ss * ss)


if HAVE_NUMBA:
    _rasterize_jit = njit(cache=True)(_rasterize_loop)

    def rasterize_numba(prims, colors, background, res, ss):
        return _rasterize_jit(np.ascontiguousarray(prims, dtype=np.float64),
                              np.ascontiguousarray(colors, dtype=np.float64),
                              np.ascontiguousarray(background, dtype=np.float64),
                              int(res), int(ss))
else:  # pragma: no cover
    rasterize_numba = None


def use_numba() -> bool:
    return HAVE_NUMBA and _numba_requested()


def rasterize(prims, colors, background, res: int, ss: int = 4) -> np.ndarray:
    """Render primitives to a res x res x 3 float image in [0, 1]."""
    if use_numba():
        return rasterize_numba(prims, colors, background, res, ss)
    return rasterize_numpy(prims, colors, background, res, ss)
