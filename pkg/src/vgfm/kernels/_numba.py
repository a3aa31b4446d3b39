"""Numba-compiled scalar-loop implementations of the hot kernels.

Compiled lazily on first call; `cache=True` persists the machine code next
to this module so later processes skip compilation.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def bilinear_many(data, xs, ys):
    n = xs.shape[0]
    h, w, c = data.shape
    out = np.empty((n, c))
    for i in range(n):
        x = xs[i]
        y = ys[i]
        if w == 1:
            x0 = 0
            x1 = 0
            fx = 0.0
        else:
            x0 = int(np.floor(x))
            if x0 > w - 2:
                x0 = w - 2
            if x0 < 0:
                x0 = 0
            x1 = x0 + 1
            fx = x - x0
        if h == 1:
            y0 = 0
            y1 = 0
            fy = 0.0
        else:
            y0 = int(np.floor(y))
            if y0 > h - 2:
                y0 = h - 2
            if y0 < 0:
                y0 = 0
            y1 = y0 + 1
            fy = y - y0
        for k in range(c):
            out[i, k] = (1.0 - fy) * (
                (1.0 - fx) * data[y0, x0, k] + fx * data[y0, x1, k]
            ) + fy * ((1.0 - fx) * data[y1, x0, k] + fx * data[y1, x1, k])
    return out


@njit(cache=True)
def roi_align_many(data, rects, bins):
    n = rects.shape[0]
    h, w, c = data.shape
    n_s = 2 * bins
    inv = 1.0 / (n_s * n_s)
    out = np.zeros((n, c))
    for i in range(n):
        bx1 = rects[i, 0]
        by1 = rects[i, 1]
        bw = rects[i, 2] - bx1
        bh = rects[i, 3] - by1
        for sy in range(n_s):
            y = by1 + bh * (sy + 0.5) / n_s
            if h == 1:
                y0 = 0
                y1 = 0
                fy = 0.0
            else:
                y0 = int(np.floor(y))
                if y0 > h - 2:
                    y0 = h - 2
                if y0 < 0:
                    y0 = 0
                y1 = y0 + 1
                fy = y - y0
            for sx in range(n_s):
                x = bx1 + bw * (sx + 0.5) / n_s
                if w == 1:
                    x0 = 0
                    x1 = 0
                    fx = 0.0
                else:
                    x0 = int(np.floor(x))
                    if x0 > w - 2:
                        x0 = w - 2
                    if x0 < 0:
                        x0 = 0
                    x1 = x0 + 1
                    fx = x - x0
                for k in range(c):
                    out[i, k] += (1.0 - fy) * (
                        (1.0 - fx) * data[y0, x0, k] + fx * data[y0, x1, k]
                    ) + fy * ((1.0 - fx) * data[y1, x0, k] + fx * data[y1, x1, k])
        for k in range(c):
            out[i, k] *= inv
    return out


@njit(cache=True)
def roi_align_scatter(h, w, c, rects, bins, grads):
    n = rects.shape[0]
    n_s = 2 * bins
    inv = 1.0 / (n_s * n_s)
    out = np.zeros((h, w, c))
    for i in range(n):
        bx1 = rects[i, 0]
        by1 = rects[i, 1]
        bw = rects[i, 2] - bx1
        bh = rects[i, 3] - by1
        for sy in range(n_s):
            y = by1 + bh * (sy + 0.5) / n_s
            if h == 1:
                y0 = 0
                y1 = 0
                fy = 0.0
            else:
                y0 = int(np.floor(y))
                if y0 > h - 2:
                    y0 = h - 2
                if y0 < 0:
                    y0 = 0
                y1 = y0 + 1
                fy = y - y0
            for sx in range(n_s):
                x = bx1 + bw * (sx + 0.5) / n_s
                if w == 1:
                    x0 = 0
                    x1 = 0
                    fx = 0.0
                else:
                    x0 = int(np.floor(x))
                    if x0 > w - 2:
                        x0 = w - 2
                    if x0 < 0:
                        x0 = 0
                    x1 = x0 + 1
                    fx = x - x0
                for k in range(c):
                    g = grads[i, k] * inv
                    out[y0, x0, k] += (1.0 - fy) * (1.0 - fx) * g
                    out[y0, x1, k] += (1.0 - fy) * fx * g
                    out[y1, x0, k] += fy * (1.0 - fx) * g
                    out[y1, x1, k] += fy * fx * g
    return out


@njit(cache=True)
def cosine_map(data, ref):
    h, w, c = data.shape
    rn = 0.0
    for k in range(c):
        rn += ref[k] * ref[k]
    rn = np.sqrt(rn)
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            dot = 0.0
            nn = 0.0
            for k in range(c):
                v = data[i, j, k]
                dot += v * ref[k]
                nn += v * v
            denom = np.sqrt(nn) * rn
            if denom > 1e-12:
                out[i, j] = dot / denom
            else:
                out[i, j] = -1.0
    return out


@njit(cache=True)
def pairwise_sqdist(x, centers):
    n, d = x.shape
    k = centers.shape[0]
    out = np.empty((n, k))
    for i in range(n):
        for j in range(k):
            acc = 0.0
            for m in range(d):
                diff = x[i, m] - centers[j, m]
                acc += diff * diff
            out[i, j] = acc
    return out
