"""Offline reference-prototype extraction.

Pools instance vectors from the labeled split's stored encoder maps, mirrors
ground-truth boxes into background samples, and clusters each class (plus
background) into K centroids with Lloyd's algorithm under k-means++ seeding.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import Box, DEFAULT_BINS, iou, roi_align_batch
from .errors import DegenerateBoxError, DomainError
from .rng import Rng
from .store import ClassPrototypes, DatasetIndex, PrototypeSet

log = logging.getLogger(__name__)

DEFAULT_K = 4
DEFAULT_BG_IOU = 0.3


@dataclass
class InstanceFeatureBag:
    """Per-class lists of pooled instance vectors."""

    channels: int
    by_class: dict[int, list[np.ndarray]] = field(default_factory=dict)
    skipped_degenerate: int = 0

    def add(self, class_id: int, vec: np.ndarray) -> None:
        self.by_class.setdefault(class_id, []).append(vec)

    def matrix(self, class_id: int) -> np.ndarray:
        vecs = self.by_class.get(class_id, [])
        if not vecs:
            return np.zeros((0, self.channels))
        return np.stack(vecs)


def pool_labeled_instances(index: DatasetIndex, bins: int = DEFAULT_BINS) -> InstanceFeatureBag:
    """ROI-pool every ground-truth box of every labeled image into the bag."""
    labeled = index.image_ids("labeled")
    if not any(index.annotations.get(i) for i in labeled):
        raise DomainError("labeled split has no annotated boxes to pool")
    bag = InstanceFeatureBag(channels=0)
    for image_id in labeled:
        anns = index.annotations.get(image_id, [])
        if not anns:
            continue
        fmap = index.load_vfm_map(image_id)
        bag.channels = fmap.channels
        for det in anns:
            try:
                vec = roi_align_batch(fmap, [det.box], bins)[0]
            except DegenerateBoxError:
                bag.skipped_degenerate += 1
                log.warning("skipping degenerate box %s in %s", det.box, image_id)
                continue
            bag.add(det.class_id, vec)
    return bag


def synthesize_background_boxes(
    gt_boxes: list[Box], image_w: float, image_h: float, iou_max: float = DEFAULT_BG_IOU
) -> list[Box]:
    """Mirror each GT box about the image centerlines to get hard negatives.

    Three candidates per box (horizontal flip, vertical flip, 180-degree point
    reflection), clamped to the image; any candidate with IoU >= iou_max
    against any GT box is dropped. An empty result is legal.
    """
    out: list[Box] = []
    for b in gt_boxes:
        candidates = [
            (image_w - b.x2, b.y1, image_w - b.x1, b.y2),
            (b.x1, image_h - b.y2, b.x2, image_h - b.y1),
            (image_w - b.x2, image_h - b.y2, image_w - b.x1, image_h - b.y1),
        ]
        for x1, y1, x2, y2 in candidates:
            x1, x2 = max(x1, 0.0), min(x2, image_w)
            y1, y2 = max(y1, 0.0), min(y2, image_h)
            if x2 - x1 <= 0 or y2 - y1 <= 0:
                continue
            cand = Box(x1, y1, x2, y2)
            if all(iou(cand, g) < iou_max for g in gt_boxes):
                out.append(cand)
    return out


@dataclass
class KMeansResult:
    centroids: np.ndarray  # (K, d)
    labels: np.ndarray  # (n,)
    objective: float  # sum of squared distances to assigned centroid
    iterations: int
    converged: bool
    duplicate_centroids: bool  # fewer distinct inputs than K


def _kmeans_objective(x: np.ndarray, centroids: np.ndarray, labels: np.ndarray) -> float:
    diff = x - centroids[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def _kmeanspp_init(x: np.ndarray, k: int, rng: Rng) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[int(rng.integers(0, n))]
    d2 = kernels.pairwise_sqdist(x, centroids[0:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining points coincide with a chosen centroid
            idx = int(rng.integers(0, n))
        else:
            r = float(rng.uniform(0.0, 1.0)) * total
            idx = int(np.searchsorted(np.cumsum(d2), r, side="right"))
            idx = min(idx, n - 1)
        centroids[j] = x[idx]
        d2 = np.minimum(d2, kernels.pairwise_sqdist(x, centroids[j : j + 1])[:, 0])
    return centroids


def kmeans(
    vectors: np.ndarray,
    k: int,
    rng: Rng,
    max_iter: int = 100,
    tol: float = 1e-8,
    n_init: int = 1,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    The squared-distance objective is non-increasing across iterations
    (asserted). Empty clusters are re-seeded at the point farthest from its
    centroid. With n_init > 1 the best of n_init seeded restarts is returned.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DomainError(f"kmeans needs a non-empty (n, d) array, got shape {x.shape}")
    if k < 1:
        raise DomainError(f"k must be >= 1, got {k}")

    best: KMeansResult | None = None
    for restart in range(n_init):
        result = _kmeans_single(x, k, rng.derive("init", restart), max_iter, tol)
        if best is None or result.objective < best.objective:
            best = result
    return best


def _kmeans_single(x: np.ndarray, k: int, rng: Rng, max_iter: int, tol: float) -> KMeansResult:
    n = x.shape[0]
    distinct = np.unique(x, axis=0).shape[0]
    centroids = _kmeanspp_init(x, k, rng)
    labels = np.argmin(kernels.pairwise_sqdist(x, centroids), axis=1)
    prev_objective = np.inf
    converged = False
    iterations = 0
    for iterations in range(1, max_iter + 1):
        # update step (mean of members), with farthest-point repair
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = x[members].mean(axis=0)
        d2 = kernels.pairwise_sqdist(x, new_centroids)
        for j in range(k):
            if not (labels == j).any():
                far = int(np.argmax(d2[np.arange(n), np.argmin(d2, axis=1)]))
                new_centroids[j] = x[far]
                d2 = kernels.pairwise_sqdist(x, new_centroids)
        new_labels = np.argmin(d2, axis=1)
        objective = _kmeans_objective(x, new_centroids, new_labels)
        assert objective <= prev_objective + 1e-9, "k-means objective increased"
        movement = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids, labels, prev_objective = new_centroids, new_labels, objective
        if movement < tol:
            converged = True
            break
    return KMeansResult(
        centroids=centroids,
        labels=labels,
        objective=prev_objective,
        iterations=iterations,
        converged=converged,
        duplicate_centroids=distinct < k,
    )


def extract_prototypes(
    index: DatasetIndex,
    k: int = DEFAULT_K,
    bins: int = DEFAULT_BINS,
    iou_max: float = DEFAULT_BG_IOU,
    rng: Rng | None = None,
    max_iter: int = 100,
) -> PrototypeSet:
    """Full offline stage: pool labeled + mirrored-background instances, cluster per class.

    Classes with zero labeled instances are marked absent; mining then rejects
    their mid-confidence predictions.
    """
    rng = rng if rng is not None else Rng(0, ("prototypes",))
    bag = pool_labeled_instances(index, bins)

    bg_id = index.background_id
    for image_id in index.image_ids("labeled"):
        anns = index.annotations.get(image_id, [])
        if not anns:
            continue
        rec = index.record(image_id)
        bg_boxes = synthesize_background_boxes(
            [d.box for d in anns], rec.width, rec.height, iou_max
        )
        if not bg_boxes:
            continue
        fmap = index.load_vfm_map(image_id)
        for vec in roi_align_batch(fmap, bg_boxes, bins):
            bag.add(bg_id, vec)

    classes: dict[int, ClassPrototypes] = {}
    absent: list[int] = []
    for cid in range(index.num_classes + 1):
        mat = bag.matrix(cid)
        if mat.shape[0] == 0:
            classes[cid] = ClassPrototypes(
                centroids=np.zeros((0, bag.channels)), counts=np.zeros(0, dtype=np.int64), present=False
            )
            absent.append(cid)
            continue
        result = kmeans(mat, k, rng.derive("class", cid), max_iter=max_iter)
        counts = np.bincount(result.labels, minlength=k).astype(np.int64)
        classes[cid] = ClassPrototypes(centroids=result.centroids, counts=counts)

    return PrototypeSet(
        channels=bag.channels,
        components=k,
        classes=classes,
        num_classes=index.num_classes,
        metadata={
            "bins": bins,
            "bg_iou_max": iou_max,
            "seed_path": list(rng.path),
            "seed": rng.seed,
            "absent_classes": absent,
            "skipped_degenerate": bag.skipped_degenerate,
        },
    )
