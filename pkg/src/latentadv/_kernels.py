"""Compiled loops for the memory-bound parts of convolution and pooling."""

import numba
import numpy as np


@numba.njit(cache=True)
def col2im_nhwc(cols, n, h, w, c, kh, kw, stride, padding, ho, wo):
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    row = 0
    for b in range(n):
        for oy in range(ho):
            for ox in range(wo):
                col = 0
                for i in range(kh):
                    y = oy * stride + i
                    for j in range(kw):
                        x = ox * stride + j
                        for ch in range(c):
                            out[b, y, x, ch] += cols[row, col + ch]
                        col += c
                row += 1
    return out


@numba.njit(cache=True)
def maxpool2_forward(x):
    n, c, h, w = x.shape
    y = np.empty((n, c, h // 2, w // 2), dtype=x.dtype)
    idx = np.empty((n, c, h // 2, w // 2), dtype=np.int8)
    for b in range(n):
        for ch in range(c):
            for oy in range(h // 2):
                for ox in range(w // 2):
                    best = x[b, ch, 2 * oy, 2 * ox]
                    k = 0
                    v = x[b, ch, 2 * oy, 2 * ox + 1]
                    if v > best:
                        best, k = v, 1
                    v = x[b, ch, 2 * oy + 1, 2 * ox]
                    if v > best:
                        best, k = v, 2
                    v = x[b, ch, 2 * oy + 1, 2 * ox + 1]
                    if v > best:
                        best, k = v, 3
                    y[b, ch, oy, ox] = best
                    idx[b, ch, oy, ox] = k
    return y, idx


@numba.njit(cache=True)
def maxpool2_backward(dy, idx, h, w):
    n, c, ho, wo = dy.shape
    dx = np.zeros((n, c, h, w), dtype=dy.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    k = idx[b, ch, oy, ox]
                    dx[b, ch, 2 * oy + k // 2, 2 * ox + k % 2] = dy[b, ch, oy, ox]
    return dx
