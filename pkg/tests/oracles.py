"""Independent reference implementations used to check the library.

Everything here is written as plain scalar loops or brute-force enumeration,
deliberately sharing no code with vgfm's vectorized/compiled paths.
"""

import itertools
import math

import numpy as np


def scalar_bilinear(data, x, y):
    """Per-channel scalar-loop bilinear sample at cell coords (x, y)."""
    h, w, c = data.shape
    if w == 1:
        x0, x1, fx = 0, 0, 0.0
    else:
        x0 = min(max(int(math.floor(x)), 0), w - 2)
        x1 = x0 + 1
        fx = x - x0
    if h == 1:
        y0, y1, fy = 0, 0, 0.0
    else:
        y0 = min(max(int(math.floor(y)), 0), h - 2)
        y1 = y0 + 1
        fy = y - y0
    out = np.zeros(c)
    for k in range(c):
        top = (1 - fx) * data[y0, x0, k] + fx * data[y0, x1, k]
        bot = (1 - fx) * data[y1, x0, k] + fx * data[y1, x1, k]
        out[k] = (1 - fy) * top + fy * bot
    return out


def dense_roi_average(data, rect, n=100):
    """Mean of bilinear samples on an n x n midpoint grid inside the rect."""
    x1, y1, x2, y2 = rect
    acc = np.zeros(data.shape[2])
    for i in range(n):
        yy = y1 + (y2 - y1) * (i + 0.5) / n
        for j in range(n):
            xx = x1 + (x2 - x1) * (j + 0.5) / n
            acc += scalar_bilinear(data, xx, yy)
    return acc / (n * n)


def roi_align_2x2_per_bin(data, rect, bins):
    """Literal 2x2-regularly-spaced-points-per-bin ROI align, scalar loops."""
    x1, y1, x2, y2 = rect
    bw = (x2 - x1) / bins
    bh = (y2 - y1) / bins
    acc = np.zeros(data.shape[2])
    for by in range(bins):
        for bx in range(bins):
            bin_acc = np.zeros(data.shape[2])
            for sy in (0.25, 0.75):
                for sx in (0.25, 0.75):
                    xx = x1 + (bx + sx) * bw
                    yy = y1 + (by + sy) * bh
                    bin_acc += scalar_bilinear(data, xx, yy)
            acc += bin_acc / 4.0
    return acc / (bins * bins)


def raster_iou(a, b, n=200_000):
    """IoU via midpoint rasterization on an n x n grid over the joint extent.

    Axis-aligned boxes factorize, so the 2-d count is computed exactly as a
    product of 1-d counts; this equals full 2-d rasterization.
    """
    lo_x = min(a[0], b[0])
    hi_x = max(a[2], b[2])
    lo_y = min(a[1], b[1])
    hi_y = max(a[3], b[3])

    def counts(lo, hi, a1, a2, b1, b2):
        xs = lo + (hi - lo) * (np.arange(n) + 0.5) / n
        in_a = (xs >= a1) & (xs <= a2)
        in_b = (xs >= b1) & (xs <= b2)
        return in_a.sum(), in_b.sum(), (in_a & in_b).sum()

    ax, bx, ix = counts(lo_x, hi_x, a[0], a[2], b[0], b[2])
    ay, by, iy = counts(lo_y, hi_y, a[1], a[3], b[1], b[3])
    inter = ix * iy
    union = ax * ay + bx * by - inter
    return inter / union if union else 0.0


def softmax_direct(v):
    e = [math.exp(x) for x in v]
    s = sum(e)
    return np.array([x / s for x in e])


def cross_entropy_direct(logits, target):
    p = softmax_direct(logits)
    return -math.log(p[target])


def brute_force_kmeans(points, k):
    """Optimal k-means objective by enumerating all label assignments."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    best = math.inf
    for labels in itertools.product(range(k), repeat=n):
        labels = np.asarray(labels)
        obj = 0.0
        for j in range(k):
            members = points[labels == j]
            if len(members):
                centroid = members.mean(axis=0)
                obj += float(((members - centroid) ** 2).sum())
        best = min(best, obj)
    return best


def kmeans_objective(points, centroids, labels):
    diff = np.asarray(points) - np.asarray(centroids)[np.asarray(labels)]
    return float((diff**2).sum())


def sinkhorn_longrun(init, eps, iterations=100_000):
    """Scaling-vector (u, v) Sinkhorn run to (numerical) convergence.

    A different formulation from the library's alternating matrix
    normalization: kernel fixed, only the scaling vectors iterate.
    """
    init = np.asarray(init, dtype=np.float64)
    n, k = init.shape
    scaled = init / eps
    kernel = np.exp(scaled - scaled.max())
    row_target = np.ones(n)
    col_target = np.full(k, n / k)
    u = np.ones(n)
    v = np.ones(k)
    for _ in range(iterations):
        u = row_target / (kernel @ v)
        v = col_target / (kernel.T @ u)
    return (u[:, None] * kernel) * v[None, :]


def central_difference_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f1 = f(x)
        flat[i] = orig - h
        f2 = f(x)
        flat[i] = orig
        gf[i] = (f1 - f2) / (2 * h)
    return g


def relative_error(analytic, numeric):
    a = np.asarray(analytic).ravel()
    b = np.asarray(numeric).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1.0)
    return float(np.linalg.norm(a - b) / denom)


def max_matching_tp(pred_boxes, pred_classes, gt_boxes, gt_classes, iou_fn, thresh=0.5):
    """Maximum-cardinality prediction->GT matching under class + IoU constraints."""
    n, m = len(pred_boxes), len(gt_boxes)
    edges = [
        [
            j
            for j in range(m)
            if pred_classes[i] == gt_classes[j] and iou_fn(pred_boxes[i], gt_boxes[j]) >= thresh
        ]
        for i in range(n)
    ]

    match_of_gt = [-1] * m

    def try_assign(i, seen):
        for j in edges[i]:
            if seen[j]:
                continue
            seen[j] = True
            if match_of_gt[j] < 0 or try_assign(match_of_gt[j], seen):
                match_of_gt[j] = i
                return True
        return False

    tp = 0
    for i in range(n):
        if try_assign(i, [False] * m):
            tp += 1
    return tp
