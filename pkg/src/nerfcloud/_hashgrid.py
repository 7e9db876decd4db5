"""Compiled kernels for the multiresolution hash-grid encoding.

Loops run serially so the scatter-add in the backward pass accumulates in a
fixed order; results are bit-reproducible for a given input.

``res`` holds the per-level cell counts as integers and ``resf`` the same
values in the table's float dtype.
"""

import numba as nb
import numpy as np

PRIME_Y = np.uint64(2654435761)
PRIME_Z = np.uint64(805459861)


@nb.njit(cache=True, inline="always")
def _cell(v, r, rf):
    s = v * rf
    b = np.int64(np.floor(s))
    if b > r - 1:
        b = r - 1
    if b < 0:
        b = 0
    return b, s - b


@nb.njit(cache=True)
def encode_forward(u, table, res, resf, mask):
    n = u.shape[0]
    n_levels, _, n_feat = table.shape
    out = np.zeros((n, n_levels * n_feat), dtype=table.dtype)
    for lvl in range(n_levels):
        r = res[lvl]
        rf = resf[lvl]
        tab = table[lvl]
        for p in range(n):
            bx, fx = _cell(u[p, 0], r, rf)
            by, fy = _cell(u[p, 1], r, rf)
            bz, fz = _cell(u[p, 2], r, rf)
            hx0, hx1 = np.uint64(bx), np.uint64(bx + 1)
            hy0, hy1 = np.uint64(by) * PRIME_Y, np.uint64(by + 1) * PRIME_Y
            hz0, hz1 = np.uint64(bz) * PRIME_Z, np.uint64(bz + 1) * PRIME_Z
            for c in range(8):
                cx, cy, cz = c & 1, (c >> 1) & 1, (c >> 2) & 1
                w = (fx if cx else 1 - fx) * (fy if cy else 1 - fy) * (fz if cz else 1 - fz)
                h = (hx1 if cx else hx0) ^ (hy1 if cy else hy0) ^ (hz1 if cz else hz0)
                idx = np.int64(h & mask)
                for f in range(n_feat):
                    out[p, lvl * n_feat + f] += w * tab[idx, f]
    return out


@nb.njit(cache=True)
def encode_backward(u, grad_out, table, res, resf, mask, need_input_grad):
    n = u.shape[0]
    n_levels, _, n_feat = table.shape
    dtable = np.zeros_like(table)
    du = np.zeros((n, 3), dtype=table.dtype)
    for lvl in range(n_levels):
        r = res[lvl]
        rf = resf[lvl]
        tab = table[lvl]
        dtab = dtable[lvl]
        for p in range(n):
            bx, fx = _cell(u[p, 0], r, rf)
            by, fy = _cell(u[p, 1], r, rf)
            bz, fz = _cell(u[p, 2], r, rf)
            hx0, hx1 = np.uint64(bx), np.uint64(bx + 1)
            hy0, hy1 = np.uint64(by) * PRIME_Y, np.uint64(by + 1) * PRIME_Y
            hz0, hz1 = np.uint64(bz) * PRIME_Z, np.uint64(bz + 1) * PRIME_Z
            gx = gy = gz = 0.0
            for c in range(8):
                cx, cy, cz = c & 1, (c >> 1) & 1, (c >> 2) & 1
                wx = fx if cx else 1 - fx
                wy = fy if cy else 1 - fy
                wz = fz if cz else 1 - fz
                w = wx * wy * wz
                h = (hx1 if cx else hx0) ^ (hy1 if cy else hy0) ^ (hz1 if cz else hz0)
                idx = np.int64(h & mask)
                g_dot = 0.0
                for f in range(n_feat):
                    g = grad_out[p, lvl * n_feat + f]
                    dtab[idx, f] += w * g
                    g_dot += g * tab[idx, f]
                if need_input_grad:
                    gx += g_dot * (wy * wz if cx else -wy * wz)
                    gy += g_dot * (wx * wz if cy else -wx * wz)
                    gz += g_dot * (wx * wy if cz else -wx * wy)
            if need_input_grad:
                du[p, 0] += gx * rf
                du[p, 1] += gy * rf
                du[p, 2] += gz * rf
    return dtable, du
