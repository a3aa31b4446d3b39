"""Desk-scale mean-teacher self-training over synthetic feature worlds.

The detector is deliberately tiny: a per-cell linear backbone over the input
map, ROI pooling of fixed per-image proposals, and a linear classifier over
C+1 classes (background last). The student is trained by SGD on the weighted
sum of supervised, pseudo-label, contrastive and image-alignment losses; the
teacher is its exponential moving average and is the only source of
pseudo-labels.

Training modes:
    supervised   labeled branch only (reference for equivalence tests)
    source_free  unsupervised branch only, fixed single threshold
    mt_semi      labeled + unsupervised, fixed single threshold
    vpm          labeled + unsupervised, prototype-gated mining
    full_vg      vpm plus both alignment losses
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import alignment
from .alignment import ProjectionHead, QueryBatch
from .core import Box, FeatureMap, log_softmax, roi_align_batch, roi_align_batch_grad, softmax
from .errors import DomainError, TrainingDiverged, ValidationError
from .mining import (
    DynamicThresholdState,
    MiningConfig,
    fixed_threshold_config,
    mine,
    mining_report,
    update_dynamic_threshold,
)
from .prototypes import extract_prototypes
from .rng import Rng
from .store import DatasetIndex, Detection, PrototypeSet, append_runlog
from .world import AugmentConfig, World, WorldConfig, strong_augment

MODES = ("supervised", "source_free", "mt_semi", "vpm", "full_vg")


@dataclass
class TrainerConfig:
    mode: str = "full_vg"
    steps: int = 400
    batch_size: int = 4
    lr: float = 0.05
    optimizer: str = "adam"  # "adam" | "sgd"; adam's per-parameter scaling
    # keeps the dense alignment gradients from drowning in the detection term
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_alpha: float = 0.999
    lambda_con: float = 0.1
    lambda_sim: float = 1.0
    unsup_weight: float = 1.0  # weight of the pseudo-label term inside the detection loss
    bins: int = 7
    query_channels: int = 12
    backbone_relu: bool = False
    mining: MiningConfig = field(default_factory=MiningConfig)
    temperature: float = alignment.TEMPERATURE
    sinkhorn_eps: float = alignment.SINKHORN_EPS
    # "random": paper-literal standard-normal affinity init; "affinity":
    # cosine of each query against running per-component class means, which
    # makes the soft clusters feature-coherent and the assignment stream
    # deterministic given the features
    sinkhorn_init: str = "random"
    running_proto_momentum: float = 0.9
    eval_every: int = 20
    eval_model: str = "student"  # "student" | "teacher"; with ema_alpha=0.999
    # the teacher lags ~1/(1-alpha) steps, so at desk scale the student curve
    # is the informative one
    source_steps: int = 200
    source_lr: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        if self.eval_model not in ("student", "teacher"):
            raise ValidationError(f"eval_model must be student or teacher, got {self.eval_model}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"optimizer must be adam or sgd, got {self.optimizer}")
        if self.sinkhorn_init not in ("random", "affinity"):
            raise ValidationError(f"sinkhorn_init must be random or affinity, got {self.sinkhorn_init}")
        if not (0.0 <= self.ema_alpha < 1.0):
            raise ValidationError(f"ema_alpha must be in [0, 1), got {self.ema_alpha}")
        if self.lambda_con < 0 or self.lambda_sim < 0 or self.unsup_weight < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValidationError("steps and batch_size must be positive")

    def uses_labeled(self) -> bool:
        return self.mode != "source_free"

    def uses_unlabeled(self) -> bool:
        return self.mode != "supervised"

    def uses_alignment(self) -> bool:
        return self.mode == "full_vg"

    def effective_mining(self) -> MiningConfig:
        """source_free / mt_semi run the plain fixed single-threshold filter."""
        if self.mode in ("source_free", "mt_semi"):
            return fixed_threshold_config(self.mining.tau_low)
        return self.mining


class ToyDetector:
    """Per-cell linear backbone + linear proposal classifier + alignment head."""

    def __init__(
        self,
        base_channels: int,
        query_channels: int,
        num_classes: int,
        vfm_channels: int,
        rng: Rng,
        use_relu: bool = False,
    ):
        self.base_channels = base_channels
        self.query_channels = query_channels
        self.num_classes = num_classes
        self.vfm_channels = vfm_channels
        self.use_relu = use_relu
        r = rng.derive("detector")
        self.backbone_w = r.derive("bw").normal(
            0.0, 1.0 / np.sqrt(base_channels), size=(query_channels, base_channels)
        )
        self.backbone_b = np.zeros(query_channels)
        self.classifier_w = r.derive("cw").normal(
            0.0, 1.0 / np.sqrt(query_channels), size=(num_classes + 1, query_channels)
        )
        self.classifier_b = np.zeros(num_classes + 1)
        self.head = ProjectionHead.init(
            ref_dim=vfm_channels, query_dim=query_channels, rng=r.derive("head"), levels=2
        )

    def params(self) -> dict[str, np.ndarray]:
        out = {
            "backbone_w": self.backbone_w,
            "backbone_b": self.backbone_b,
            "classifier_w": self.classifier_w,
            "classifier_b": self.classifier_b,
        }
        for name, arr in self.head.params().items():
            out[f"head.{name}"] = arr
        return out

    def set_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        if set(own) != set(values):
            raise DomainError("parameter name mismatch")
        for name, arr in own.items():
            if arr.shape != values[name].shape:
                raise DomainError(f"shape mismatch for {name}")
            arr[...] = values[name]

    def clone(self) -> "ToyDetector":
        other = ToyDetector(
            self.base_channels,
            self.query_channels,
            self.num_classes,
            self.vfm_channels,
            Rng(0, ("clone",)),
            self.use_relu,
        )
        other.set_params({n: p.copy() for n, p in self.params().items()})
        return other

    def checkpoint_hash(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.params()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.params()[name]).tobytes())
        return digest.hexdigest()[:16]


def save_checkpoint(det: ToyDetector, path) -> None:
    doc = {
        "schema_version": 1,
        "dims": {
            "base_channels": det.base_channels,
            "query_channels": det.query_channels,
            "num_classes": det.num_classes,
            "vfm_channels": det.vfm_channels,
            "use_relu": det.use_relu,
        },
        "params": {n: p.tolist() for n, p in sorted(det.params().items())},
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_checkpoint(path) -> ToyDetector:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    dims = doc["dims"]
    det = ToyDetector(
        base_channels=int(dims["base_channels"]),
        query_channels=int(dims["query_channels"]),
        num_classes=int(dims["num_classes"]),
        vfm_channels=int(dims["vfm_channels"]),
        rng=Rng(0, ("load",)),
        use_relu=bool(dims["use_relu"]),
    )
    det.set_params({n: np.asarray(p, dtype=np.float64) for n, p in doc["params"].items()})
    return det


class Optimizer:
    """Plain SGD or Adam over a named parameter dict."""

    def __init__(self, names, lr: float, kind: str = "adam",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind = kind
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {n: None for n in names}
        self.v = {n: None for n in names}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        if self.kind == "sgd":
            for name, g in grads.items():
                params[name] -= self.lr * g
            return
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, g in grads.items():
            if self.m[name] is None:
                self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            params[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def ema_update(teacher: dict[str, np.ndarray], student: dict[str, np.ndarray], alpha: float) -> None:
    """theta_t <- alpha * theta_t + (1 - alpha) * theta_s, in place."""
    if set(teacher) != set(student):
        raise DomainError("teacher/student parameter names differ")
    for name, t in teacher.items():
        s = student[name]
        if t.shape != s.shape:
            raise DomainError(f"shape mismatch for {name}: {t.shape} vs {s.shape}")
        t *= alpha
        t += (1.0 - alpha) * s


def _avgpool2(data: np.ndarray) -> np.ndarray:
    h, w, c = data.shape
    h2, w2 = h // 2, w // 2
    if h2 == 0 or w2 == 0:
        return data.copy()
    trimmed = data[: h2 * 2, : w2 * 2]
    return trimmed.reshape(h2, 2, w2, 2, c).mean(axis=(1, 3))


def _avgpool2_backward(grad: np.ndarray, h: int, w: int, c: int) -> np.ndarray:
    out = np.zeros((h, w, c))
    h2, w2 = grad.shape[0], grad.shape[1]
    if h2 * 2 > h or w2 * 2 > w:  # map too small to pool; gradient passes through
        return grad.copy()
    out[: h2 * 2, : w2 * 2] = np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) / 4.0
    return out


@dataclass
class ForwardCache:
    fmap: FeatureMap
    proposals: list[Box]
    kept: list[int]  # proposal indices that pooled successfully
    pre_act: np.ndarray
    level0: FeatureMap
    level1: FeatureMap
    queries: np.ndarray  # (n, dq)
    logits: np.ndarray  # (n, C+1)
    skipped: int = 0


def forward(det: ToyDetector, fmap: FeatureMap, proposals: list[Box], bins: int) -> ForwardCache:
    """Backbone per cell, two pyramid levels, ROI-pooled queries, logits."""
    pre = fmap.data @ det.backbone_w.T + det.backbone_b
    feat = np.maximum(pre, 0.0) if det.use_relu else pre
    level0 = FeatureMap(data=feat, stride=fmap.stride)
    level1 = FeatureMap(data=_avgpool2(feat), stride=fmap.stride * 2)
    kept = []
    boxes = []
    for i, box in enumerate(proposals):
        cells = (box.width / fmap.stride) * (box.height / fmap.stride)
        if cells < 1e-6:
            continue
        kept.append(i)
        boxes.append(box)
    queries = roi_align_batch(level0, boxes, bins)
    logits = queries @ det.classifier_w.T + det.classifier_b
    return ForwardCache(
        fmap=fmap,
        proposals=boxes,
        kept=kept,
        pre_act=pre,
        level0=level0,
        level1=level1,
        queries=queries,
        logits=logits,
        skipped=len(proposals) - len(boxes),
    )


def backward(
    det: ToyDetector,
    cache: ForwardCache,
    bins: int,
    d_logits: np.ndarray | None = None,
    d_queries: np.ndarray | None = None,
    d_level_maps: list[np.ndarray] | None = None,
) -> dict[str, np.ndarray]:
    """Accumulate gradients of any mix of logit / query / map cotangents."""
    grads = {
        "backbone_w": np.zeros_like(det.backbone_w),
        "backbone_b": np.zeros_like(det.backbone_b),
        "classifier_w": np.zeros_like(det.classifier_w),
        "classifier_b": np.zeros_like(det.classifier_b),
    }
    n = cache.queries.shape[0]
    d_q = np.zeros_like(cache.queries)
    if d_logits is not None and n:
        grads["classifier_w"] += d_logits.T @ cache.queries
        grads["classifier_b"] += d_logits.sum(axis=0)
        d_q += d_logits @ det.classifier_w
    if d_queries is not None:
        d_q += d_queries
    d_feat = np.zeros_like(cache.level0.data)
    if n and np.any(d_q):
        d_feat += roi_align_batch_grad(cache.level0, cache.proposals, bins, d_q)
    if d_level_maps is not None:
        d_feat += d_level_maps[0]
        h, w, c = cache.level0.data.shape
        d_feat += _avgpool2_backward(d_level_maps[1], h, w, c)
    if det.use_relu:
        d_feat = d_feat * (cache.pre_act > 0.0)
    grads["backbone_w"] += np.einsum("hwq,hwc->qc", d_feat, cache.fmap.data)
    grads["backbone_b"] += d_feat.sum(axis=(0, 1))
    return grads


def detection_loss(logits: np.ndarray, targets: np.ndarray):
    """Mean softmax cross-entropy over proposals; returns (value, d_logits)."""
    n = logits.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape[0] != n:
        raise DomainError("targets must align with proposals")
    logp = log_softmax(logits, axis=1)
    loss = float(-logp[np.arange(n), targets].mean())
    d = softmax(logits, axis=1)
    d[np.arange(n), targets] -= 1.0
    return loss, d / n


def assign_targets(proposals: list[Box], references: list[Detection], bg_id: int, iou_thresh: float = 0.5):
    """Per proposal: class of the max-IoU reference box at IoU >= thresh, else background."""
    from .core import iou as _iou

    targets = np.full(len(proposals), bg_id, dtype=np.int64)
    for i, prop in enumerate(proposals):
        best = iou_thresh
        for ref in references:
            v = _iou(prop, ref.box)
            if v >= best:
                best = v
                targets[i] = ref.class_id
    return targets


def teacher_predictions(det: ToyDetector, cache: ForwardCache) -> list[Detection]:
    """Score = max foreground softmax probability; class = its argmax."""
    probs = softmax(cache.logits, axis=1)
    fg = probs[:, : det.num_classes]
    out = []
    for i, box in enumerate(cache.proposals):
        cls = int(np.argmax(fg[i]))
        out.append(Detection(box=box, class_id=cls, score=float(fg[i, cls]), source="teacher"))
    return out


def evaluate(det: ToyDetector, index: DatasetIndex, split: str = "eval", bins: int = 7) -> dict:
    """Greedy IoU-0.5 AP per class over score-ranked proposal classifications."""
    bg = index.background_id
    per_class_dets: dict[int, list[tuple[float, str, Box]]] = {c: [] for c in range(index.num_classes)}
    n_gt = {c: 0 for c in range(index.num_classes)}
    correct = 0
    total = 0
    for image_id in index.image_ids(split):
        fmap = index.load_input_map(image_id)
        proposals = index.proposals.get(image_id, [])
        if not proposals:
            continue
        cache = forward(det, fmap, proposals, bins)
        probs = softmax(cache.logits, axis=1)
        gt = index.annotations.get(image_id, [])
        for d in gt:
            n_gt[d.class_id] += 1
        targets = assign_targets(cache.proposals, gt, bg)
        pred = np.argmax(probs, axis=1)
        correct += int((pred == targets).sum())
        total += len(cache.proposals)
        for i, box in enumerate(cache.proposals):
            cls = int(pred[i])
            if cls == bg:
                continue
            per_class_dets[cls].append((float(probs[i, cls]), image_id, box))

    gt_boxes: dict[str, list[Detection]] = {
        i: index.annotations.get(i, []) for i in index.image_ids(split)
    }
    per_class_ap = {}
    for cls in range(index.num_classes):
        if n_gt[cls] == 0:
            continue
        per_class_ap[cls] = _average_precision(per_class_dets[cls], gt_boxes, cls, n_gt[cls])
    mean_ap = float(np.mean(list(per_class_ap.values()))) if per_class_ap else 0.0
    return {
        "map": mean_ap,
        "per_class_ap": {str(c): v for c, v in sorted(per_class_ap.items())},
        "accuracy": correct / total if total else 0.0,
    }


def _average_precision(dets, gt_boxes, cls: int, n_gt: int) -> float:
    from .core import iou as _iou

    order = sorted(range(len(dets)), key=lambda i: (-dets[i][0], dets[i][1], i))
    used: dict[str, list[bool]] = {}
    tp = np.zeros(len(order))
    fp = np.zeros(len(order))
    for rank, i in enumerate(order):
        _score, image_id, box = dets[i]
        gts = [d for d in gt_boxes.get(image_id, []) if d.class_id == cls]
        flags = used.setdefault(image_id, [False] * len(gts))
        best_j = -1
        best_v = 0.5
        for j, g in enumerate(gts):
            if flags[j]:
                continue
            v = _iou(box, g.box)
            if v >= best_v:
                best_v = v
                best_j = j
        if best_j >= 0:
            flags[best_j] = True
            tp[rank] = 1.0
        else:
            fp[rank] = 1.0
    if len(order) == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(fp)
    recall = tp_cum / n_gt
    precision = tp_cum / np.maximum(tp_cum + fp_cum, 1e-12)
    # area under the right-monotonized precision envelope
    ap = 0.0
    prev_r = 0.0
    for k in range(len(order)):
        if tp[k]:
            ap += np.max(precision[k:]) * (recall[k] - prev_r)
            prev_r = recall[k]
    return float(ap)


def stability_report(records: list[dict], metric: str = "map") -> dict:
    """Peak/final summary with a >=10%-relative-drop collapse flag."""
    points = [
        (rec["step"], rec["eval"][metric])
        for rec in records
        if rec.get("eval") is not None
    ]
    if len(points) < 2:
        raise DomainError("stability report needs at least two eval points")
    values = [v for _s, v in points]
    peak_idx = int(np.argmax(values))
    peak = values[peak_idx]
    final = values[-1]
    collapse = (peak - final) > 0.10 * peak
    collapse_step = None
    if collapse:
        for step, v in points[peak_idx + 1 :]:
            if peak - v > 0.10 * peak:
                collapse_step = step
                break
    return {
        "peak": peak,
        "peak_step": points[peak_idx][0],
        "final": final,
        "collapse": bool(collapse),
        "collapse_step": collapse_step,
    }


class Trainer:
    """Owns the mutable training state: student, teacher, threshold, log."""

    def __init__(
        self,
        index: DatasetIndex,
        cfg: TrainerConfig,
        student: ToyDetector,
        protos: PrototypeSet | None = None,
        augment: AugmentConfig | None = None,
    ):
        self.index = index
        self.cfg = cfg
        self.student = student
        self.teacher = student.clone()
        self.protos = protos
        self.augment = augment if augment is not None else AugmentConfig()
        self.mining_cfg = cfg.effective_mining()
        self.thresh_state = DynamicThresholdState.init(self.mining_cfg)
        self.rng = Rng(cfg.seed, ("trainer",))
        self.records: list[dict] = []
        self._maps: dict[str, tuple[FeatureMap, FeatureMap]] = {}
        self.labeled_ids = index.image_ids("labeled")
        self.unlabeled_ids = index.image_ids("unlabeled")
        if cfg.uses_labeled() and not self.labeled_ids:
            raise ValidationError(f"mode {cfg.mode} needs a labeled split")
        if cfg.uses_unlabeled() and not self.unlabeled_ids:
            raise ValidationError(f"mode {cfg.mode} needs an unlabeled split")
        if cfg.mode in ("vpm", "full_vg") and protos is None:
            raise ValidationError(f"mode {cfg.mode} needs a prototype set")
        self._epoch_size = max(
            1,
            (len(self.unlabeled_ids) if cfg.uses_unlabeled() else len(self.labeled_ids))
            // cfg.batch_size,
        )
        self.optimizer = Optimizer(
            list(student.params()), cfg.lr, cfg.optimizer,
            cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
        )
        # running per-(class, component) prototype means for the affinity init
        self._running_protos: np.ndarray | None = None
        self._running_mask: np.ndarray | None = None

    def _load(self, image_id: str) -> tuple[FeatureMap, FeatureMap]:
        if image_id not in self._maps:
            self._maps[image_id] = (
                self.index.load_input_map(image_id),
                self.index.load_vfm_map(image_id),
            )
        return self._maps[image_id]

    def _sample(self, rng: Rng, ids: list[str], n: int) -> list[str]:
        if not ids:
            return []
        picks = rng.choice(len(ids), size=n, replace=len(ids) < n)
        return [ids[int(i)] for i in picks]

    def run(self, runlog_fh=None, eval_at_end: bool = True) -> list[dict]:
        eval_net = self.student if self.cfg.eval_model == "student" else self.teacher
        for step in range(1, self.cfg.steps + 1):
            record = self.train_step(step)
            last = step == self.cfg.steps
            # step 1 is evaluated so the near-initial quality anchors the curve
            due = step == 1 or (self.cfg.eval_every and step % self.cfg.eval_every == 0)
            if due or (last and eval_at_end):
                record["eval"] = evaluate(eval_net, self.index, "eval", self.cfg.bins)
            if step % self._epoch_size == 0 or last:
                record["epoch"] = step // self._epoch_size
                record["checkpoint_hash"] = self.student.checkpoint_hash()
            self.records.append(record)
            if runlog_fh is not None:
                append_runlog(runlog_fh, record)
        return self.records

    def train_step(self, step: int) -> dict:
        cfg = self.cfg
        rng = self.rng.derive("step", step)
        bg = self.index.background_id

        accum: dict[str, np.ndarray] = {
            name: np.zeros_like(p) for name, p in self.student.params().items()
        }
        losses = {"sup": 0.0, "unsup": 0.0, "con": 0.0, "sim": 0.0}
        pseudo_stats = None

        def check_finite(image_id, cache):
            if cache.logits.size and not np.isfinite(cache.logits).all():
                raise TrainingDiverged(
                    f"non-finite logits on {image_id} at step {step}",
                    {"step": step, "image": image_id, "tau_high": self.thresh_state.tau_high},
                )

        sup_items = []  # (cache, targets)
        if cfg.uses_labeled():
            for image_id in self._sample(rng.derive("labeled"), self.labeled_ids, cfg.batch_size):
                input_map, _vfm = self._load(image_id)
                cache = forward(self.student, input_map, self.index.proposals[image_id], cfg.bins)
                check_finite(image_id, cache)
                targets = assign_targets(
                    cache.proposals, self.index.annotations.get(image_id, []), bg
                )
                sup_items.append((image_id, cache, targets))

        unsup_items = []  # (image_id, cache, targets)
        if cfg.uses_unlabeled():
            batch_ids = self._sample(rng.derive("unlabeled"), self.unlabeled_ids, cfg.batch_size)
            mined_sets = {}
            all_scores: list[float] = []
            for image_id in batch_ids:
                input_map, vfm_map = self._load(image_id)
                teacher_cache = forward(
                    self.teacher, input_map, self.index.proposals[image_id], cfg.bins
                )
                check_finite(image_id, teacher_cache)
                preds = teacher_predictions(self.teacher, teacher_cache)
                assert all(p.source == "teacher" for p in preds)
                mined = mine(preds, vfm_map, self.protos, self.mining_cfg, self.thresh_state)
                mined_sets[image_id] = mined
                all_scores.extend(p.score for p in preds)

                student_view = strong_augment(
                    input_map, self.augment, self.rng.derive("augment", step, image_id)
                )
                cache = forward(self.student, student_view, self.index.proposals[image_id], cfg.bins)
                check_finite(image_id, cache)
                targets = assign_targets(cache.proposals, mined.accepted_detections(), bg)
                unsup_items.append((image_id, cache, targets))

            if self.mining_cfg.tau_high_mode == "dynamic":
                self.thresh_state = update_dynamic_threshold(
                    self.thresh_state, all_scores, self.mining_cfg
                )
            pseudo_stats = mining_report(
                mined_sets, {i: self.index.annotations.get(i, []) for i in batch_ids}
            )

        # --- detection losses (mean CE over all proposals in the branch) ---
        if sup_items:
            logits = np.vstack([c.logits for _i, c, _t in sup_items])
            targets = np.concatenate([t for _i, _c, t in sup_items])
            losses["sup"], d_logits = detection_loss(logits, targets)
            offset = 0
            for _image_id, cache, _t in sup_items:
                n = cache.logits.shape[0]
                g = backward(self.student, cache, cfg.bins, d_logits=d_logits[offset : offset + n])
                _accumulate(accum, g)
                offset += n
        d_unsup_logits = None
        if unsup_items:
            logits = np.vstack([c.logits for _i, c, _t in unsup_items])
            targets = np.concatenate([t for _i, _c, t in unsup_items])
            losses["unsup"], d_unsup_logits = detection_loss(logits, targets)
            d_unsup_logits = d_unsup_logits * cfg.unsup_weight

        # --- alignment losses over the whole student batch (both branches) ---
        align_items = sup_items + unsup_items
        d_queries_per_item = [None] * len(align_items)
        d_maps_per_item = [None] * len(align_items)
        if cfg.uses_alignment() and align_items:
            losses["con"] = self._contrastive(rng, align_items, d_queries_per_item, accum)
            losses["sim"] = self._image_alignment(align_items, d_maps_per_item, accum)
            # labeled-branch caches were already backpropagated for the
            # supervised loss; their alignment cotangents go through here
            for idx in range(len(sup_items)):
                _image_id, cache, _t = align_items[idx]
                if d_queries_per_item[idx] is None and d_maps_per_item[idx] is None:
                    continue
                g = backward(
                    self.student,
                    cache,
                    cfg.bins,
                    d_queries=d_queries_per_item[idx],
                    d_level_maps=d_maps_per_item[idx],
                )
                _accumulate(accum, g)

        if unsup_items:
            offset = 0
            for idx, (_image_id, cache, _t) in enumerate(unsup_items):
                n = cache.logits.shape[0]
                g = backward(
                    self.student,
                    cache,
                    cfg.bins,
                    d_logits=d_unsup_logits[offset : offset + n],
                    d_queries=d_queries_per_item[len(sup_items) + idx],
                    d_level_maps=d_maps_per_item[len(sup_items) + idx],
                )
                _accumulate(accum, g)
                offset += n

        total = (
            losses["sup"]
            + cfg.unsup_weight * losses["unsup"]
            + cfg.lambda_con * losses["con"]
            + cfg.lambda_sim * losses["sim"]
        )
        if not np.isfinite(total):
            dump = {
                "step": step,
                "losses": losses,
                "labeled": [i for i, _c, _t in sup_items],
                "unlabeled": [i for i, _c, _t in unsup_items],
                "tau_high": self.thresh_state.tau_high,
            }
            raise TrainingDiverged(f"non-finite loss at step {step}", dump)

        params = self.student.params()
        self.optimizer.step(params, accum)
        ema_update(self.teacher.params(), params, cfg.ema_alpha)

        record = {
            "step": step,
            "losses": {
                "sup": losses["sup"],
                "unsup": losses["unsup"],
                "con": losses["con"],
                "sim": losses["sim"],
                "total": total,
            },
            "tau_high": self.thresh_state.tau_high,
            "pseudo": None,
            "eval": None,
        }
        if pseudo_stats is not None:
            record["pseudo"] = {
                "precision": pseudo_stats["precision"],
                "recall": pseudo_stats["recall"],
                "f1": pseudo_stats["f1"],
                "count": pseudo_stats["accepted"],
                "reasons": pseudo_stats["reasons"],
            }
        return record

    def _contrastive(self, rng: Rng, unsup_items, d_queries_per_item, accum) -> float:
        cfg = self.cfg
        feats = np.vstack([c.queries for _i, c, _t in unsup_items])
        fg_logits = np.vstack([c.logits[:, : self.index.num_classes] for _i, c, _t in unsup_items])
        batch = QueryBatch(features=feats, logits=fg_logits)
        c_classes = self.index.num_classes
        k = self.protos.components
        batch_protos = np.zeros((c_classes, k, cfg.query_channels))
        batch_present = np.zeros((c_classes, k), dtype=bool)
        assignments = {}
        row_indices = {}
        for cls in range(c_classes):
            rows = np.nonzero(batch.labels == cls)[0]
            if rows.size == 0:
                continue
            init = self._sinkhorn_init(rng, cls, batch.features[rows], k)
            assign = alignment.sinkhorn_assign(init, eps=cfg.sinkhorn_eps)
            protos_c, present = alignment.aggregate_prototypes(batch.features[rows], assign)
            batch_protos[cls] = protos_c
            batch_present[cls] = present
            assignments[cls] = assign
            row_indices[cls] = rows

        ref = np.zeros((c_classes, k, self.protos.channels))
        ref_present = np.zeros((c_classes, k), dtype=bool)
        for cls in range(c_classes):
            entry = self.protos.classes[cls]
            if entry.present:
                ref[cls] = entry.centroids
                ref_present[cls] = True

        self._update_running_protos(batch_protos, batch_present)
        result = alignment.contrastive_loss(
            batch_protos,
            batch_present,
            ref,
            ref_present,
            self.student.head,
            temperature=cfg.temperature,
        )
        for name, g in result.head_grads.items():
            accum[f"head.{name}"] += cfg.lambda_con * g

        d_feats = np.zeros_like(feats)
        for cls, rows in row_indices.items():
            d_feats[rows] += alignment.prototype_grads_to_queries(
                assignments[cls], result.grad_prototypes[cls]
            )
        offset = 0
        for idx, (_i, cache, _t) in enumerate(unsup_items):
            n = cache.queries.shape[0]
            d_queries_per_item[idx] = cfg.lambda_con * d_feats[offset : offset + n]
            offset += n
        return result.loss

    def _sinkhorn_init(self, rng: Rng, cls: int, queries: np.ndarray, k: int) -> np.ndarray:
        if self.cfg.sinkhorn_init == "random" or self._running_protos is None or not self._running_mask[cls].any():
            return rng.derive("sinkhorn", cls).normal(size=(queries.shape[0], k))
        means = self._running_protos[cls]  # (K, dq)
        norms_q = np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
        norms_m = np.maximum(np.linalg.norm(means, axis=1), 1e-12)
        init = (queries / norms_q) @ (means / norms_m[:, None]).T
        absent = ~self._running_mask[cls]
        if absent.any():  # unseen components keep exploring randomly
            init[:, absent] = rng.derive("sinkhorn", cls).normal(size=(queries.shape[0], int(absent.sum())))
        return init

    def _update_running_protos(self, batch_protos: np.ndarray, batch_present: np.ndarray) -> None:
        if self._running_protos is None:
            self._running_protos = np.zeros_like(batch_protos)
            self._running_mask = np.zeros(batch_present.shape, dtype=bool)
        m = self.cfg.running_proto_momentum
        fresh = batch_present & ~self._running_mask
        self._running_protos[fresh] = batch_protos[fresh]
        keep = batch_present & self._running_mask
        self._running_protos[keep] = m * self._running_protos[keep] + (1 - m) * batch_protos[keep]
        self._running_mask |= batch_present

    def _image_alignment(self, unsup_items, d_maps_per_item, accum) -> float:
        cfg = self.cfg
        total = 0.0
        for idx, (image_id, cache, _t) in enumerate(unsup_items):
            _input_map, vfm_map = self._load(image_id)
            result = alignment.image_alignment_loss(
                [cache.level0, cache.level1], vfm_map, self.student.head
            )
            total += result.loss
            share = cfg.lambda_sim / len(unsup_items)
            for l in range(len(result.conv_w_grads)):
                accum[f"head.conv_w{l}"] += share * result.conv_w_grads[l]
                accum[f"head.conv_b{l}"] += share * result.conv_b_grads[l]
            d_maps_per_item[idx] = [g * share for g in result.map_grads]
        return total / len(unsup_items)


def _accumulate(accum: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        accum[name] += g


def pretrain_source(world_cfg: WorldConfig, cfg: TrainerConfig, num_source_images: int = 60) -> ToyDetector:
    """Fit the detector on an unshifted fully labeled source world.

    Shares the target world's class signatures (both derive from the same
    seed), so the source model is competent but miscalibrated under shift.
    """
    src_cfg = replace(
        world_cfg,
        num_images=num_source_images,
        shift=replace(world_cfg.shift, angle=0.0, noise_sigma=0.0),
        # the target domain's clutter types are novel to the source domain
        distractors_per_image=(0, 0),
        labeled_fraction=1.0,
        eval_fraction=0.0,
    )
    world = World.from_config(src_cfg)
    images = [world.build_image(i) for i in range(src_cfg.num_images)]
    rng = Rng(cfg.seed, ("source",))
    det = ToyDetector(
        base_channels=world_cfg.base_channels,
        query_channels=cfg.query_channels,
        num_classes=world_cfg.num_classes,
        vfm_channels=world_cfg.vfm_channels,
        rng=rng,
        use_relu=cfg.backbone_relu,
    )
    bg = world_cfg.num_classes
    trained = ("backbone_w", "backbone_b", "classifier_w", "classifier_b")
    opt = Optimizer(trained, cfg.source_lr, cfg.optimizer,
                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    for step in range(cfg.source_steps):
        picks = rng.derive("batch", step).choice(len(images), size=cfg.batch_size, replace=False)
        accum = None
        loss_total = 0.0
        for i in picks:
            clean, _vfm, shifted, gt, proposals = images[int(i)]
            cache = forward(det, shifted, proposals, cfg.bins)
            targets = assign_targets(cache.proposals, gt, bg)
            loss, d_logits = detection_loss(cache.logits, targets)
            loss_total += loss
            g = backward(det, cache, cfg.bins, d_logits=d_logits)
            if accum is None:
                accum = g
            else:
                _accumulate(accum, g)
        for name in accum:
            accum[name] /= cfg.batch_size
        opt.step(det.params(), {n: accum[n] for n in trained})
    return det


def simulate(
    world_cfg: WorldConfig,
    cfg: TrainerConfig,
    out_dir,
    runlog_path=None,
    index: DatasetIndex | None = None,
    workers: int = 1,
) -> dict:
    """End-to-end pipeline: world, source model, prototypes, adaptation run."""
    from .world import generate_world

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if index is None:
        index = generate_world(world_cfg, out_dir / "world", workers=workers)

    protos = None
    if cfg.mode in ("vpm", "full_vg"):
        protos = extract_prototypes(
            index,
            k=4,
            bins=cfg.bins,
            rng=Rng(cfg.seed, ("prototypes",)),
        )

    student = pretrain_source(world_cfg, cfg)
    trainer = Trainer(index, cfg, student, protos=protos, augment=world_cfg.augment)

    if runlog_path is None:
        runlog_path = out_dir / "runlog.jsonl"
    with open(runlog_path, "w", encoding="utf-8") as fh:
        trainer.run(runlog_fh=fh)

    save_checkpoint(trainer.student, out_dir / "student.json")
    save_checkpoint(trainer.teacher, out_dir / "teacher.json")
    summary = stability_report(trainer.records)
    summary["final_eval"] = trainer.records[-1]["eval"]
    return {"records": trainer.records, "summary": summary, "trainer": trainer}
