"""Reliability-gated pseudo-label mining.

Teacher predictions are split by confidence: scores at or above the upper
threshold pass directly, scores below the lower threshold are dropped, and
the mid band is adjudicated by cosine similarity between the prediction's
pooled encoder feature and the reference prototypes (background included).
A mid-band prediction survives only when the best-matching prototype belongs
to its own predicted class and the similarity clears `sim_threshold`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .core import DEFAULT_BINS, FeatureMap, clamp, iou, roi_align_batch
from .errors import DegenerateBoxError, DomainError, ValidationError
from .store import Detection, PrototypeSet

REASONS = ("below_low", "sim_fail", "class_mismatch", "bg_match")


@dataclass(frozen=True)
class MiningConfig:
    tau_low: float = 0.3
    tau_high_mode: str = "dynamic"  # "fixed" | "dynamic"
    tau_high_value: float = 0.7  # upper threshold in fixed mode
    sim_threshold: float = 0.5
    dynamic_beta: float = 0.99
    dynamic_init: float = 0.7
    clamp_margin: float = 0.1  # lower clamp bound = tau_low + clamp_margin
    clamp_max: float = 0.95
    bins: int = DEFAULT_BINS

    def __post_init__(self):
        if self.tau_high_mode not in ("fixed", "dynamic"):
            raise ValidationError(f"unknown tau_high_mode {self.tau_high_mode!r}")
        if not (0.0 <= self.tau_low <= self.clamp_max <= 1.0):
            raise ValidationError(
                f"need 0 <= tau_low <= clamp_max <= 1, got {self.tau_low}, {self.clamp_max}"
            )
        # sim_threshold > 1 is legal: it disables mining and leaves the pure
        # dual-threshold filter.
        if self.sim_threshold <= -1.0:
            raise ValidationError(f"sim_threshold must exceed -1, got {self.sim_threshold}")

    @property
    def clamp_bounds(self) -> tuple[float, float]:
        return (min(self.tau_low + self.clamp_margin, self.clamp_max), self.clamp_max)


def fixed_threshold_config(tau: float) -> MiningConfig:
    """Plain single-threshold baseline: accept score >= tau, nothing mined."""
    return MiningConfig(tau_low=tau, tau_high_mode="fixed", tau_high_value=tau)


@dataclass(frozen=True)
class DynamicThresholdState:
    tau_high: float
    updates: int = 0

    @staticmethod
    def init(cfg: MiningConfig) -> "DynamicThresholdState":
        lo, hi = cfg.clamp_bounds
        return DynamicThresholdState(tau_high=clamp(cfg.dynamic_init, lo, hi))


def update_dynamic_threshold(
    state: DynamicThresholdState, scores, cfg: MiningConfig
) -> DynamicThresholdState:
    """EMA of the mean confident score, clamped; no-op on an empty batch."""
    scores = np.asarray(list(scores), dtype=np.float64)
    qualifying = scores[scores > cfg.tau_low]
    if qualifying.size == 0:
        return state
    lo, hi = cfg.clamp_bounds
    beta = cfg.dynamic_beta
    new = clamp(beta * state.tau_high + (1.0 - beta) * float(qualifying.mean()), lo, hi)
    return DynamicThresholdState(tau_high=new, updates=state.updates + 1)


@dataclass(frozen=True)
class MinedDetection:
    detection: Detection
    tag: str  # "direct" | "mined"
    similarity: float | None = None  # best prototype cosine, mined path only
    matched_class: int | None = None


@dataclass
class MinedLabelSet:
    accepted: list[MinedDetection]
    rejected: list[tuple[Detection, str]]
    tau_high: float
    pooled: int = 0  # mid-band predictions that actually hit the prototype path
    absent_class: int = 0  # mid-band rejects whose predicted class had no prototypes

    @property
    def reason_counts(self) -> dict[str, int]:
        counts = {r: 0 for r in REASONS}
        for _det, reason in self.rejected:
            counts[reason] += 1
        return counts

    def accepted_detections(self) -> list[Detection]:
        return [m.detection for m in self.accepted]


def _prototype_bank(protos: PrototypeSet):
    """Stacked centroid matrix with a class id per row.

    Rows are ordered by (class id asc, component asc) with background last,
    so argmax tie-breaking is deterministic: lowest class id, then lowest
    component index.
    """
    rows = []
    owners = []
    for cid in sorted(protos.classes):
        entry = protos.classes[cid]
        if not entry.present:
            continue
        rows.append(entry.centroids)
        owners.extend([cid] * entry.centroids.shape[0])
    if not rows:
        raise DomainError("prototype set has no present classes")
    return np.vstack(rows), np.asarray(owners, dtype=np.int64)


def mine(
    predictions: list[Detection],
    vfm_map: FeatureMap | None,
    protos: PrototypeSet | None,
    cfg: MiningConfig,
    state: DynamicThresholdState | None = None,
) -> MinedLabelSet:
    """Partition predictions into accepted (direct/mined) and per-reason rejects.

    `vfm_map`/`protos` may be None only if no prediction can reach the
    mid band (e.g. the fixed single-threshold baseline).
    """
    if cfg.tau_high_mode == "dynamic":
        if state is None:
            raise DomainError("dynamic tau_high mode requires a DynamicThresholdState")
        tau_high = state.tau_high
    else:
        tau_high = cfg.tau_high_value

    accepted: list[MinedDetection] = []
    rejected: list[tuple[Detection, str]] = []
    mid_band: list[Detection] = []
    for det in predictions:
        if det.score is None:
            raise DomainError("mining requires scored predictions")
        if det.score >= tau_high:
            accepted.append(MinedDetection(det, "direct"))
        elif det.score < cfg.tau_low:
            rejected.append((det, "below_low"))
        else:
            mid_band.append(det)

    pooled = 0
    absent_class = 0
    if mid_band:
        if protos is None or vfm_map is None:
            raise DomainError("mid-band predictions need a prototype set and an encoder map")
        bank, owners = _prototype_bank(protos)
        if bank.shape[1] != vfm_map.channels:
            raise DomainError(
                f"prototype dim {bank.shape[1]} != encoder map channels {vfm_map.channels}"
            )
        bank_norms = np.linalg.norm(bank, axis=1)
        present = {cid for cid, e in protos.classes.items() if e.present}
        for det in mid_band:
            if det.class_id not in present:
                absent_class += 1
                rejected.append((det, "sim_fail"))
                continue
            try:
                feat = roi_align_batch(vfm_map, [det.box], cfg.bins)[0]
            except DegenerateBoxError:
                rejected.append((det, "sim_fail"))
                continue
            pooled += 1
            feat_norm = float(np.linalg.norm(feat))
            if feat_norm <= 1e-12:
                # degenerate pooled vector: treated as similarity -1 everywhere
                rejected.append((det, "sim_fail"))
                continue
            sims = (bank @ feat) / (bank_norms * feat_norm)
            best = int(np.argmax(sims))
            best_sim = float(sims[best])
            best_cls = int(owners[best])
            if best_sim < cfg.sim_threshold:
                rejected.append((det, "sim_fail"))
            elif best_cls == protos.background_id:
                rejected.append((det, "bg_match"))
            elif best_cls != det.class_id:
                rejected.append((det, "class_mismatch"))
            else:
                accepted.append(
                    MinedDetection(det, "mined", similarity=best_sim, matched_class=best_cls)
                )

    return MinedLabelSet(
        accepted=accepted,
        rejected=rejected,
        tau_high=tau_high,
        pooled=pooled,
        absent_class=absent_class,
    )


def similarity_map(vfm_map: FeatureMap, reference: Box, bins: int = DEFAULT_BINS) -> np.ndarray:
    """Cosine between the pooled reference box and every cell; (H, W) grid."""
    ref = roi_align_batch(vfm_map, [reference], bins)[0]
    return kernels.cosine_map(vfm_map.data, ref)


def _greedy_match(preds: list[Detection], gts: list[Detection], iou_match: float):
    """Score-ordered greedy matching; returns number of true positives."""
    order = sorted(range(len(preds)), key=lambda i: (-(preds[i].score or 0.0), i))
    used = [False] * len(gts)
    tp = 0
    for i in order:
        det = preds[i]
        best_j = -1
        best_iou = iou_match
        for j, gt in enumerate(gts):
            if used[j] or gt.class_id != det.class_id:
                continue
            v = iou(det.box, gt.box)
            if v >= best_iou:
                best_iou = v
                best_j = j
        if best_j >= 0:
            used[best_j] = True
            tp += 1
    return tp


def mining_report(
    mined: dict[str, MinedLabelSet],
    gt: dict[str, list[Detection]],
    iou_match: float = 0.5,
) -> dict:
    """Precision/recall/F1 of accepted pseudo-labels against ground truth."""
    tp = 0
    n_pred = 0
    n_gt = 0
    reasons = {r: 0 for r in REASONS}
    tags = {"direct": 0, "mined": 0}
    for image_id, labels in mined.items():
        preds = labels.accepted_detections()
        gts = gt.get(image_id, [])
        tp += _greedy_match(preds, gts, iou_match)
        n_pred += len(preds)
        n_gt += len(gts)
        for r, c in labels.reason_counts.items():
            reasons[r] += c
        for m in labels.accepted:
            tags[m.tag] += 1
    precision = 1.0 if n_pred == 0 else tp / n_pred
    recall = 1.0 if n_gt == 0 else tp / n_gt
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "true_positives": tp,
        "accepted": n_pred,
        "ground_truth": n_gt,
        "reasons": reasons,
        "tags": tags,
    }
