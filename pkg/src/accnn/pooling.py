"""Bin-max pooling over rectangular feature regions, with argmax routing.

Shared by RoI pooling (one region per proposal) and the fixed-size pooling
of the whole cube in the global branch.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .tensor import Tensor, _acc, _make


@njit(cache=True)
def _bin_edges(start, extent, n_bins, limit):
    lo = np.empty(n_bins, dtype=np.int64)
    hi = np.empty(n_bins, dtype=np.int64)
    size = extent / n_bins
    for p in range(n_bins):
        a = start + int(np.floor(p * size))
        b = start + int(np.ceil((p + 1) * size))
        a = min(max(a, 0), limit)
        b = min(max(b, 0), limit)
        lo[p] = a
        hi[p] = b
    # empty bins copy the nearest nonempty one
    for p in range(n_bins):
        if hi[p] <= lo[p]:
            best = -1
            for dist in range(1, n_bins):
                for q in (p - dist, p + dist):
                    if 0 <= q < n_bins and hi[q] > lo[q]:
                        best = q
                        break
                if best >= 0:
                    break
            if best >= 0:
                lo[p] = lo[best]
                hi[p] = hi[best]
            else:
                c = min(max(start, 0), limit - 1)
                lo[p] = c
                hi[p] = c + 1
    return lo, hi


@njit(cache=True)
def _pool_forward(cube, regions, P):
    H, W, D = cube.shape
    R = regions.shape[0]
    out = np.empty((R, P, P, D), dtype=cube.dtype)
    arg = np.empty((R, P, P, D), dtype=np.int64)
    for r in range(R):
        y0, x0, y1, x1 = regions[r, 0], regions[r, 1], regions[r, 2], regions[r, 3]
        ylo, yhi = _bin_edges(y0, y1 - y0, P, H)
        xlo, xhi = _bin_edges(x0, x1 - x0, P, W)
        for i in range(P):
            for j in range(P):
                for d in range(D):
                    best = -np.inf
                    besti = ylo[i] * W + xlo[j]
                    for y in range(ylo[i], yhi[i]):
                        for x in range(xlo[j], xhi[j]):
                            v = cube[y, x, d]
                            if v > best:
                                best = v
                                besti = y * W + x
                    out[r, i, j, d] = best
                    arg[r, i, j, d] = besti
    return out, arg


@njit(cache=True)
def _pool_backward(g, arg, H, W):
    R, P, _, D = g.shape
    gc = np.zeros((H * W, D), dtype=g.dtype)
    for r in range(R):
        for i in range(P):
            for j in range(P):
                for d in range(D):
                    gc[arg[r, i, j, d], d] += g[r, i, j, d]
    return gc.reshape(H, W, D)


def bin_edges(start: int, extent: int, n_bins: int, limit: int) -> tuple[np.ndarray, np.ndarray]:
    """Half-open [lo, hi) cell ranges for ``n_bins`` proportional bins."""
    return _bin_edges(int(start), int(extent), int(n_bins), int(limit))


def region_max_pool(cube: Tensor, regions: np.ndarray, P: int) -> Tensor:
    """Max-pool each region of an (H, W, D) cube into P x P bins.

    ``regions`` is an integer array (R, 4) of half-open cell ranges
    ``(y0, x0, y1, x1)``.  Returns (R, P, P, D); gradients go to the argmax
    cell of each bin.
    """
    if P < 1:
        raise ValueError("pool size must be >= 1")
    regions = np.ascontiguousarray(regions, dtype=np.int64).reshape(-1, 4)
    H, W, _ = cube.shape
    out, arg = _pool_forward(np.ascontiguousarray(cube.data), regions, int(P))

    def _bw(g):
        _acc(cube, _pool_backward(np.ascontiguousarray(g), arg, H, W))

    return _make(out, (cube,), _bw)
