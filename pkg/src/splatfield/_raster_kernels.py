"""numba kernels for tile-based splat compositing.

All arrays crossing the kernel boundary are float64; callers cast parameter
storage (usually f32) on the way in. Every loop is ordered so results are
bitwise reproducible regardless of thread count: tiles are data-parallel and
write disjoint pixels, and per-candidate gradient slots are disjoint per tile.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

TILE = 16
TRANSMITTANCE_MIN = 1e-4
ALPHA_SKIP = 1.0 / 255.0
ALPHA_MAX = 0.99
# pmax = 2*ln(255*alpha) + margin: p > pmax guarantees alpha' < 1/255, so the
# exp can be skipped without changing which splats contribute.
PMAX_MARGIN = 0.25


@njit(parallel=True, cache=True)
def forward_tiles(
    mean2d, conic, alpha, pmax, rad, values, order, offsets, tile_ids,
    H, W, ntx, background, img, t_final, n_contrib, last_contrib,
):
    C = values.shape[1]
    for t in prange(offsets.shape[0] - 1):
        ty = tile_ids[t] // ntx
        tx = tile_ids[t] % ntx
        lo = offsets[t]
        hi = offsets[t + 1]
        x0 = tx * TILE
        y0 = ty * TILE
        w_t = min(TILE, W - x0)
        h_t = min(TILE, H - y0)
        T = np.empty((h_t, w_t), np.float64)
        acc = np.zeros((h_t, w_t, C), np.float64)
        last = np.full((h_t, w_t), -1, np.int64)
        cnt = np.zeros((h_t, w_t), np.int32)
        row_alive = np.empty(h_t, np.int32)
        for i in range(h_t):
            row_alive[i] = w_t
            for j in range(w_t):
                T[i, j] = 1.0
        alive = w_t * h_t
        for k in range(lo, hi):
            if alive == 0:
                break
            g = order[k]
            mx = mean2d[g, 0]
            my = mean2d[g, 1]
            r = rad[g]
            i0 = max(0, int(math.ceil(my - r - 0.5)) - y0)
            i1 = min(h_t - 1, int(math.floor(my + r - 0.5)) - y0)
            j0 = max(0, int(math.ceil(mx - r - 0.5)) - x0)
            j1 = min(w_t - 1, int(math.floor(mx + r - 0.5)) - x0)
            if i0 > i1 or j0 > j1:
                continue
            ca = conic[g, 0]
            cb = conic[g, 1]
            cc = conic[g, 2]
            op = alpha[g]
            pm = pmax[g]
            for i in range(i0, i1 + 1):
                if row_alive[i] == 0:
                    continue
                dy = y0 + i + 0.5 - my
                for j in range(j0, j1 + 1):
                    Tij = T[i, j]
                    if Tij < TRANSMITTANCE_MIN:
                        continue
                    dx = x0 + j + 0.5 - mx
                    p = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if p > pm:
                        continue
                    a = op * math.exp(-0.5 * p)
                    if a < ALPHA_SKIP:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = Tij * a
                    for c in range(C):
                        acc[i, j, c] += w * values[g, c]
                    Tij = Tij * (1.0 - a)
                    T[i, j] = Tij
                    last[i, j] = k
                    cnt[i, j] += 1
                    if Tij < TRANSMITTANCE_MIN:
                        alive -= 1
                        row_alive[i] -= 1
        for i in range(h_t):
            for j in range(w_t):
                Tf = T[i, j]
                for c in range(C):
                    img[y0 + i, x0 + j, c] = acc[i, j, c] + Tf * background[c]
                t_final[y0 + i, x0 + j] = Tf
                n_contrib[y0 + i, x0 + j] = cnt[i, j]
                last_contrib[y0 + i, x0 + j] = last[i, j]


@njit(parallel=True, cache=True)
def backward_tiles(
    mean2d, conic, alpha, pmax, rad, values, order, offsets, tile_ids,
    H, W, ntx, background, grad_img, t_final, last_contrib, inst_grad,
):
    """Reverse sweep filling inst_grad (M, 6 + C) per tile-candidate slot.

    Columns: d_mean2d (2), d_conic as (d_ca, d_cb_total, d_cc), d_opacity
    pre-sigmoid, then d_values (C). Slots are indexed by the global CSR
    candidate position, so tiles never write the same slot.
    """
    C = values.shape[1]
    for t in prange(offsets.shape[0] - 1):
        ty = tile_ids[t] // ntx
        tx = tile_ids[t] % ntx
        lo = offsets[t]
        hi = offsets[t + 1]
        x0 = tx * TILE
        y0 = ty * TILE
        w_t = min(TILE, W - x0)
        h_t = min(TILE, H - y0)
        T_next = np.empty((h_t, w_t), np.float64)
        S = np.zeros((h_t, w_t, C), np.float64)
        last = np.empty((h_t, w_t), np.int64)
        k_max = lo - 1
        for i in range(h_t):
            for j in range(w_t):
                Tf = t_final[y0 + i, x0 + j]
                T_next[i, j] = Tf
                for c in range(C):
                    S[i, j, c] = Tf * background[c]
                lk = last_contrib[y0 + i, x0 + j]
                last[i, j] = lk
                if lk > k_max:
                    k_max = lk
        for k in range(k_max, lo - 1, -1):
            g = order[k]
            mx = mean2d[g, 0]
            my = mean2d[g, 1]
            r = rad[g]
            i0 = max(0, int(math.ceil(my - r - 0.5)) - y0)
            i1 = min(h_t - 1, int(math.floor(my + r - 0.5)) - y0)
            j0 = max(0, int(math.ceil(mx - r - 0.5)) - x0)
            j1 = min(w_t - 1, int(math.floor(mx + r - 0.5)) - x0)
            if i0 > i1 or j0 > j1:
                continue
            ca = conic[g, 0]
            cb = conic[g, 1]
            cc = conic[g, 2]
            op = alpha[g]
            pm = pmax[g]
            d_mx = 0.0
            d_my = 0.0
            d_ca = 0.0
            d_cb = 0.0
            d_cc = 0.0
            d_op = 0.0
            for i in range(i0, i1 + 1):
                dy = y0 + i + 0.5 - my
                for j in range(j0, j1 + 1):
                    if k > last[i, j]:
                        continue
                    dx = x0 + j + 0.5 - mx
                    p = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                    if p > pm:
                        continue
                    a = op * math.exp(-0.5 * p)
                    if a < ALPHA_SKIP:
                        continue
                    clamped = a > ALPHA_MAX
                    ap = ALPHA_MAX if clamped else a
                    one_m = 1.0 - ap
                    T_i = T_next[i, j] / one_m
                    w = ap * T_i
                    d_ap = 0.0
                    for c in range(C):
                        gc = grad_img[y0 + i, x0 + j, c]
                        inst_grad[k, 6 + c] += w * gc
                        d_ap += gc * (T_i * values[g, c] - S[i, j, c] / one_m)
                        S[i, j, c] += w * values[g, c]
                    T_next[i, j] = T_i
                    if not clamped:
                        # a = sigmoid(o) * exp(-p/2): chain to p and to o
                        d_p = d_ap * (-0.5 * a)
                        d_op += d_ap * a * (1.0 - op)
                        d_ca += d_p * dx * dx
                        d_cb += d_p * 2.0 * dx * dy
                        d_cc += d_p * dy * dy
                        gx = d_p * 2.0 * (ca * dx + cb * dy)
                        gy = d_p * 2.0 * (cb * dx + cc * dy)
                        # dx = pixel - mean2d
                        d_mx -= gx
                        d_my -= gy
            inst_grad[k, 0] = d_mx
            inst_grad[k, 1] = d_my
            inst_grad[k, 2] = d_ca
            inst_grad[k, 3] = d_cb
            inst_grad[k, 4] = d_cc
            inst_grad[k, 5] = d_op
