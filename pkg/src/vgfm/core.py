"""Dense feature-map tensors and the shared numerical kernels.

Coordinate conventions used throughout the toolkit:

* Boxes are in image-pixel units, corner format (x1, y1, x2, y2), origin
  top-left.
* A feature map cell (row, col) covers the pixel square
  [col*stride, (col+1)*stride) x [row*stride, (row+1)*stride); its center
  sits at pixel ((col+0.5)*stride, (row+0.5)*stride).
* Continuous cell coordinates therefore relate to pixels by
  cell = pixel/stride - 0.5, and bilinear sampling is defined on
  [0, width-1] x [0, height-1], exact at integer (cell-center) coordinates.

All in-memory math is float64; file formats store float32 (see vgfm.store).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import DegenerateBoxError, DegenerateVectorError, DomainError

DEFAULT_BINS = 7


@dataclass(frozen=True)
class FeatureMap:
    """Dense H x W x C grid of real features with a pixel stride."""

    data: np.ndarray
    stride: float

    def __post_init__(self):
        arr = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise DomainError(f"feature map must be (h, w, c) with positive dims, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise DomainError("feature map contains non-finite values")
        stride = float(self.stride)
        if not np.isfinite(stride) or stride <= 0:
            raise DomainError(f"stride must be a positive real, got {self.stride}")
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "stride", stride)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def pixel_width(self) -> float:
        return self.width * self.stride

    @property
    def pixel_height(self) -> float:
        return self.height * self.stride


@dataclass(frozen=True)
class Box:
    """Axis-aligned pixel box, corners (x1, y1) top-left and (x2, y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise DomainError(f"box coordinates must be finite, got {vals}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise DomainError(f"box must satisfy x2 > x1 and y2 > y1, got {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def bilinear_sample(fmap: FeatureMap, x: float, y: float) -> np.ndarray:
    """Bilinear blend of the four cells around continuous cell coords (x, y).

    Exact at integer coordinates. Raises DomainError outside
    [0, width-1] x [0, height-1]; callers clamp first if they want
    border extension.
    """
    if not (np.isfinite(x) and np.isfinite(y)):
        raise DomainError(f"sample coordinates must be finite, got ({x}, {y})")
    if not (0.0 <= x <= fmap.width - 1 and 0.0 <= y <= fmap.height - 1):
        raise DomainError(
            f"sample ({x}, {y}) outside [0, {fmap.width - 1}] x [0, {fmap.height - 1}]"
        )
    xs = np.array([float(x)])
    ys = np.array([float(y)])
    return kernels.bilinear_many(fmap.data, xs, ys)[0]


def _boxes_to_rects(fmap: FeatureMap, boxes) -> np.ndarray:
    """Pixel boxes -> clamped cell-coordinate sampling rects, validating each.

    The sampling rect is the box in continuous cell coordinates intersected
    with the bilinear-definable extent [0, w-1] x [0, h-1]; a box that only
    overlaps the outer half-cell margin collapses to a border line, which
    still pools (as a line/point average).
    """
    rects = np.empty((len(boxes), 4))
    inv = 1.0 / fmap.stride
    for i, box in enumerate(boxes):
        if box.width * box.height * inv * inv < 1e-6:
            raise DegenerateBoxError(f"box {box} has near-zero area in cells")
        if (
            box.x1 >= fmap.pixel_width
            or box.x2 <= 0.0
            or box.y1 >= fmap.pixel_height
            or box.y2 <= 0.0
        ):
            raise DomainError(f"box {box} lies fully outside the map extent")
        rects[i, 0] = min(max(box.x1 * inv - 0.5, 0.0), fmap.width - 1)
        rects[i, 1] = min(max(box.y1 * inv - 0.5, 0.0), fmap.height - 1)
        rects[i, 2] = min(max(box.x2 * inv - 0.5, 0.0), fmap.width - 1)
        rects[i, 3] = min(max(box.y2 * inv - 0.5, 0.0), fmap.height - 1)
    return rects


def roi_align(fmap: FeatureMap, box: Box, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Average-pool a pixel box into one channel vector.

    A bins x bins grid is laid over the box (converted to cell coordinates);
    each bin is averaged from 2x2 regularly spaced interior bilinear samples,
    and the result is the mean over bins. Equivalently: the mean of bilinear
    samples on the (2*bins)^2 midpoint grid of the box.
    """
    return roi_align_batch(fmap, [box], bins)[0]


def roi_align_batch(fmap: FeatureMap, boxes, bins: int = DEFAULT_BINS) -> np.ndarray:
    """roi_align over a list of boxes; returns (n, channels)."""
    if bins < 1:
        raise DomainError(f"bins must be >= 1, got {bins}")
    if len(boxes) == 0:
        return np.zeros((0, fmap.channels))
    rects = _boxes_to_rects(fmap, boxes)
    return kernels.roi_align_many(fmap.data, rects, int(bins))


def roi_align_batch_grad(
    fmap: FeatureMap, boxes, bins: int, grads: np.ndarray
) -> np.ndarray:
    """Adjoint of roi_align_batch: scatter per-box gradients back onto the map.

    `grads` is (n, channels); returns an (h, w, c) gradient array. roi_align
    is linear in the map values, so this is exact.
    """
    if len(boxes) == 0:
        return np.zeros_like(fmap.data)
    rects = _boxes_to_rects(fmap, boxes)
    return kernels.roi_align_scatter(
        fmap.height, fmap.width, fmap.channels, rects, int(bins), np.asarray(grads, dtype=np.float64)
    )


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """a.b / (|a| |b|); raises DegenerateVectorError when either norm <= 1e-12."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"vector shapes differ: {a.shape} vs {b.shape}")
    na = float(np.sqrt(np.dot(a, a)))
    nb = float(np.sqrt(np.dot(b, b)))
    if na <= 1e-12 or nb <= 1e-12:
        raise DegenerateVectorError("cosine similarity of a (near-)zero vector")
    return float(np.dot(a, b) / (na * nb))


def iou(a: Box, b: Box) -> float:
    """Intersection-over-union of two pixel boxes, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, (len(a), len(b))."""
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a):
        for j, b in enumerate(boxes_b):
            out[i, j] = iou(a, b)
    return out


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-shifted softmax along `axis`; rows sum to 1 within 1e-9."""
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise DomainError("softmax input must be finite")
    shifted = v - v.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if not np.isfinite(v).all():
        raise DomainError("log_softmax input must be finite")
    shifted = v - v.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def sigmoid(x):
    """Numerically stable logistic function; scalar in, scalar out."""
    arr = np.atleast_1d(np.asarray(x, dtype=np.float64))
    out = np.empty_like(arr)
    pos = arr >= 0
    neg = ~pos
    out[pos] = 1.0 / (1.0 + np.exp(-arr[pos]))
    ex = np.exp(arr[neg])
    out[neg] = ex / (1.0 + ex)
    if np.asarray(x).ndim == 0:
        return float(out[0])
    return out.reshape(np.asarray(x).shape)


def clamp(value: float, lo: float, hi: float) -> float:
    return max(lo, min(hi, value))
