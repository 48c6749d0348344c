"""Compiled tile rasterizer (forward and backward) for projected 2D Gaussians.

Inputs are already depth-sorted front to back. Every Gaussian is binned into
the tiles overlapped by the axis-aligned box of its 3-sigma ellipse; each tile list inherits the
global order, so per-pixel compositing order equals the global order.

Gradients are accumulated per (tile, list entry) pair and reduced to
Gaussians in pair order afterwards, so the result does not depend on which
thread handled which tile.
"""

import math
import os

import numba
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"

TILE = 4
CUTOFF = 4.5  # 0.5 * 3^2
EDGE = math.exp(-CUTOFF)
MAX_ALPHA = 0.999
MIN_T = 1e-4


@numba.njit(cache=True)
def _pixel_range(m, r, n):
    lo = int(math.ceil(m - r - 0.5))
    hi = int(math.floor(m + r - 0.5))
    if lo < 0:
        lo = 0
    if hi > n - 1:
        hi = n - 1
    return lo, hi


@numba.njit(cache=True)
def bin_gaussians(means2d, extents, height, width):
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    n = means2d.shape[0]
    counts = np.zeros(tw * th + 1, dtype=np.int64)
    for g in range(n):
        rx = extents[g, 0]
        ry = extents[g, 1]
        if rx <= 0.0 or ry <= 0.0:
            continue
        x0, x1 = _pixel_range(means2d[g, 0], rx, width)
        y0, y1 = _pixel_range(means2d[g, 1], ry, height)
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                counts[ty * tw + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for g in range(n):
        rx = extents[g, 0]
        ry = extents[g, 1]
        if rx <= 0.0 or ry <= 0.0:
            continue
        x0, x1 = _pixel_range(means2d[g, 0], rx, width)
        y0, y1 = _pixel_range(means2d[g, 1], ry, height)
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // TILE, y1 // TILE + 1):
            for tx in range(x0 // TILE, x1 // TILE + 1):
                t = ty * tw + tx
                ids[fill[t]] = g
                fill[t] += 1
    return offsets, ids


@numba.njit(cache=True, inline="always")
def _alpha(g, px, py, means2d, conics, opac):
    dx = px - means2d[g, 0]
    dy = py - means2d[g, 1]
    q = 0.5 * (conics[g, 0] * dx * dx + 2.0 * conics[g, 1] * dx * dy + conics[g, 2] * dy * dy)
    if q > CUTOFF or q < 0.0:
        return 0.0, 0.0, dx, dy, 0.0
    e = math.exp(-q)
    G = (e - EDGE) / (1.0 - EDGE)
    return opac[g] * G, G, dx, dy, e


@numba.njit(cache=True, parallel=True)
def rasterize_forward(means2d, conics, opac, colors, bg, offsets, ids, height, width):
    K = colors.shape[1]
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    out = np.zeros((height, width, K), dtype=colors.dtype)
    t_final = np.ones((height, width), dtype=colors.dtype)
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for tile in numba.prange(tw * th):
        ty = tile // tw
        tx = tile % tw
        start = offsets[tile]
        end = offsets[tile + 1]
        acc = np.zeros(K)
        for i in range(ty * TILE, min(height, ty * TILE + TILE)):
            py = i + 0.5
            for j in range(tx * TILE, min(width, tx * TILE + TILE)):
                px = j + 0.5
                T = 1.0
                last = 0
                for k in range(K):
                    acc[k] = 0.0
                for p in range(start, end):
                    g = ids[p]
                    a, G, dx, dy, e = _alpha(g, px, py, means2d, conics, opac)
                    if a <= 0.0:
                        continue
                    if a > MAX_ALPHA:
                        a = MAX_ALPHA
                    w = a * T
                    for k in range(K):
                        acc[k] += colors[g, k] * w
                    T *= 1.0 - a
                    last = p - start + 1
                    if T < MIN_T:
                        break
                for k in range(K):
                    out[i, j, k] = acc[k] + T * bg[k]
                t_final[i, j] = T
                n_contrib[i, j] = last
    return out, t_final, n_contrib


@numba.njit(cache=True, parallel=True)
def rasterize_backward(means2d, conics, opac, colors, bg, offsets, ids, height, width,
                       t_final, n_contrib, grad_out, grad_alpha):
    K = colors.shape[1]
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    n_pairs = ids.shape[0]
    pg_mean = np.zeros((n_pairs, 2))
    pg_conic = np.zeros((n_pairs, 3))
    pg_opac = np.zeros(n_pairs)
    pg_color = np.zeros((n_pairs, K))
    max_len = 0
    for tile in range(tw * th):
        ln = offsets[tile + 1] - offsets[tile]
        if ln > max_len:
            max_len = ln
    for tile in numba.prange(tw * th):
        ty = tile // tw
        tx = tile % tw
        start = offsets[tile]
        buf_p = np.empty(max_len, dtype=np.int64)
        buf_a = np.empty(max_len)
        buf_T = np.empty(max_len)
        S = np.zeros(K)
        for i in range(ty * TILE, min(height, ty * TILE + TILE)):
            py = i + 0.5
            for j in range(tx * TILE, min(width, tx * TILE + TILE)):
                px = j + 0.5
                last = n_contrib[i, j]
                if last == 0:
                    continue
                # replay the forward pass to recover exact transmittances
                T = 1.0
                nb = 0
                for p in range(start, start + last):
                    g = ids[p]
                    a, G, dx, dy, e = _alpha(g, px, py, means2d, conics, opac)
                    if a <= 0.0:
                        continue
                    if a > MAX_ALPHA:
                        a = MAX_ALPHA
                    buf_p[nb] = p
                    buf_a[nb] = a
                    buf_T[nb] = T
                    nb += 1
                    T *= 1.0 - a
                Tf = t_final[i, j]
                ga = grad_alpha[i, j]
                for k in range(K):
                    S[k] = Tf * bg[k]
                for b in range(nb - 1, -1, -1):
                    p = buf_p[b]
                    g = ids[p]
                    a = buf_a[b]
                    Ti = buf_T[b]
                    inv = 1.0 / (1.0 - a)
                    dL_da = ga * Tf * inv
                    for k in range(K):
                        gk = grad_out[i, j, k]
                        dL_da += gk * (colors[g, k] * Ti - S[k] * inv)
                        pg_color[p, k] += gk * a * Ti
                        S[k] += colors[g, k] * a * Ti
                    a_raw, G, dx, dy, e = _alpha(g, px, py, means2d, conics, opac)
                    if a_raw > MAX_ALPHA:
                        continue
                    pg_opac[p] += dL_da * G
                    dL_dq = -dL_da * opac[g] * e / (1.0 - EDGE)
                    A = conics[g, 0]
                    B = conics[g, 1]
                    C = conics[g, 2]
                    pg_mean[p, 0] += -dL_dq * (A * dx + B * dy)
                    pg_mean[p, 1] += -dL_dq * (B * dx + C * dy)
                    pg_conic[p, 0] += dL_dq * 0.5 * dx * dx
                    pg_conic[p, 1] += dL_dq * dx * dy
                    pg_conic[p, 2] += dL_dq * 0.5 * dy * dy
    n = means2d.shape[0]
    g_mean = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opac = np.zeros(n)
    g_color = np.zeros((n, K))
    for p in range(n_pairs):
        g = ids[p]
        g_mean[g, 0] += pg_mean[p, 0]
        g_mean[g, 1] += pg_mean[p, 1]
        for c in range(3):
            g_conic[g, c] += pg_conic[p, c]
        g_opac[g] += pg_opac[p]
        for k in range(K):
            g_color[g, k] += pg_color[p, k]
    return g_mean, g_conic, g_opac, g_color
