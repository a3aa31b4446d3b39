"""Pure-numpy reference implementations of the hot kernels."""

import numpy as np


def _corner_indices(coords, extent):
    """Lower corner index and fractional offset for 1-d bilinear sampling."""
    if extent == 1:
        lo = np.zeros(coords.shape, dtype=np.intp)
        frac = np.zeros_like(coords)
        return lo, lo, frac
    lo = np.floor(coords).astype(np.intp)
    np.clip(lo, 0, extent - 2, out=lo)
    frac = coords - lo
    return lo, lo + 1, frac


def bilinear_many(data, xs, ys):
    h, w, _ = data.shape
    x0, x1, fx = _corner_indices(xs, w)
    y0, y1, fy = _corner_indices(ys, h)
    fx = fx[:, None]
    fy = fy[:, None]
    # Same expression tree as the numba kernel so elementwise results match.
    return (1.0 - fy) * ((1.0 - fx) * data[y0, x0] + fx * data[y0, x1]) + fy * (
        (1.0 - fx) * data[y1, x0] + fx * data[y1, x1]
    )


def _sample_grid(rects, bins):
    """Midpoint sample coordinates, (n, 2*bins) per axis."""
    n_s = 2 * bins
    offs = (np.arange(n_s) + 0.5) / n_s
    xs = rects[:, 0:1] + (rects[:, 2:3] - rects[:, 0:1]) * offs[None, :]
    ys = rects[:, 1:2] + (rects[:, 3:4] - rects[:, 1:2]) * offs[None, :]
    return xs, ys


def roi_align_many(data, rects, bins):
    n = rects.shape[0]
    c = data.shape[2]
    n_s = 2 * bins
    xs, ys = _sample_grid(rects, bins)
    gx = np.broadcast_to(xs[:, None, :], (n, n_s, n_s)).reshape(-1)
    gy = np.broadcast_to(ys[:, :, None], (n, n_s, n_s)).reshape(-1)
    samples = bilinear_many(data, gx, gy).reshape(n, n_s * n_s, c)
    return samples.mean(axis=1)


def roi_align_scatter(h, w, c, rects, bins, grads):
    n = rects.shape[0]
    n_s = 2 * bins
    xs, ys = _sample_grid(rects, bins)
    gx = np.broadcast_to(xs[:, None, :], (n, n_s, n_s)).reshape(-1)
    gy = np.broadcast_to(ys[:, :, None], (n, n_s, n_s)).reshape(-1)
    x0, x1, fx = _corner_indices(gx, w)
    y0, y1, fy = _corner_indices(gy, h)
    g = np.repeat(grads / (n_s * n_s), n_s * n_s, axis=0)
    out = np.zeros((h, w, c))
    np.add.at(out, (y0, x0), (1.0 - fy)[:, None] * (1.0 - fx)[:, None] * g)
    np.add.at(out, (y0, x1), (1.0 - fy)[:, None] * fx[:, None] * g)
    np.add.at(out, (y1, x0), fy[:, None] * (1.0 - fx)[:, None] * g)
    np.add.at(out, (y1, x1), fy[:, None] * fx[:, None] * g)
    return out


def cosine_map(data, ref):
    ref_norm = np.sqrt(np.dot(ref, ref))
    dots = data @ ref
    norms = np.sqrt(np.einsum("hwc,hwc->hw", data, data))
    denom = norms * ref_norm
    out = np.full(dots.shape, -1.0)
    ok = denom > 1e-12
    np.divide(dots, denom, out=out, where=ok)
    return out


def pairwise_sqdist(x, centers):
    n = x.shape[0]
    k = centers.shape[0]
    out = np.empty((n, k))
    for j in range(k):
        diff = x - centers[j]
        out[:, j] = np.einsum("nd,nd->n", diff, diff)
    return out
