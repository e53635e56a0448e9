"""Compiled inner loops for the scatter-add and pooling hot spots."""
import numba
import numpy as np


@numba.njit(cache=True)
def col2im(dcols, c, n, hp, wp, kh, kw):
    """Adjoint of im2col: scatter-add patch gradients back to (C, N, Hp, Wp)."""
    ho = hp - kh + 1
    wo = wp - kw + 1
    dxp = np.zeros((c, n, hp, wp), dtype=np.float64)
    for ci in range(c):
        for a in range(kh):
            for b in range(kw):
                row = (ci * kh + a) * kw + b
                for m in range(n):
                    base = m * ho * wo
                    for i in range(ho):
                        for j in range(wo):
                            dxp[ci, m, i + a, j + b] += dcols[row, base + i * wo + j]
    return dxp


@numba.njit(cache=True)
def maxpool(x, ph, pw):
    """Max over non-overlapping windows of (P, H, W); first max in row-major order wins.

    Returns the pooled values and, per output cell, the flat index of the
    winner in ``x``.
    """
    p_count, h, w = x.shape
    ho = h // ph
    wo = w // pw
    out = np.empty((p_count, ho, wo), dtype=np.float64)
    idx = np.empty((p_count, ho, wo), dtype=np.int64)
    for p in range(p_count):
        for i in range(ho):
            for j in range(wo):
                r0 = i * ph
                c0 = j * pw
                best = x[p, r0, c0]
                best_at = (p * h + r0) * w + c0
                for a in range(ph):
                    for b in range(pw):
                        v = x[p, r0 + a, c0 + b]
                        if v > best:
                            best = v
                            best_at = (p * h + r0 + a) * w + c0 + b
                out[p, i, j] = best
                idx[p, i, j] = best_at
    return out, idx
