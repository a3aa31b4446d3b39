"""Deterministic synthetic feature worlds.

A world is a set of images, each realized directly in feature space: a base
map (`base_channels` wide) of background noise with class signature vectors
planted inside ground-truth boxes. Two derived maps are persisted per image:

* the *frozen-encoder* map: a fixed seeded channel embedding of the clean
  base map (what an offline foundation-model pass would have stored), and
* the *input* map: the base map pushed through the world's domain shift
  (channel rotation + noise) - what the detector under adaptation sees.

Everything is a pure function of the config, so regenerating a world with
the same config is byte-identical.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.linalg import expm

from .core import Box, FeatureMap, iou
from .errors import ValidationError
from .rng import Rng
from .store import DatasetIndex, Detection, ImageRecord, write_dataset, write_feature_map


@dataclass(frozen=True)
class ShiftConfig:
    angle: float = 0.6  # rotation magnitude of the channel-mixing map, radians
    noise_sigma: float = 0.15
    # "random": rotation plane drawn from the seed; "classes": rotation built
    # inside the class-signature span (cyclic), which confuses classes while
    # preserving objectness - the regime where pseudo-label noise compounds
    mixing: str = "random"

    def __post_init__(self):
        if self.mixing not in ("random", "classes"):
            raise ValidationError(f"unknown shift mixing {self.mixing!r}")


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.25
    channel_drop: float = 0.1


@dataclass(frozen=True)
class ProposalConfig:
    jitter_sigma: float = 0.3  # cells, applied per box corner
    negatives_per_image: int = 4
    negative_max_iou: float = 0.3


@dataclass(frozen=True)
class WorldConfig:
    num_images: int = 200
    grid_h: int = 24
    grid_w: int = 24
    base_channels: int = 8
    vfm_channels: int = 16
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (2, 5)
    box_size_range: tuple[int, int] = (4, 7)  # cells
    margin: float = 1.0  # distinct signatures must have cosine <= 1 - margin
    stride: float = 8.0
    background_sigma: float = 0.35
    object_noise_sigma: float = 0.12
    signature_amplitude: float = 1.0
    # unannotated clutter blobs: object-like patches along a few per-world
    # directions that sit near (but off) class signatures, so a shifted
    # detector scores them like objects while the encoder map does not
    distractors_per_image: tuple[int, int] = (0, 0)
    distractor_amplitude: float = 0.9
    distractor_types: int = 2
    # extra clutter types that appear only in eval-split images: a probe of
    # feature robustness to scene content absent from all training images
    novel_distractor_types: int = 0
    # clutter types the labeled split is allowed to contain (None = all);
    # fixing this below distractor_types pins the label-coverage asymmetry
    # across seeds instead of leaving it to the split shuffle
    labeled_type_coverage: int | None = None
    distractor_jitter: float = 0.15
    shift: ShiftConfig = field(default_factory=ShiftConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    proposals: ProposalConfig = field(default_factory=ProposalConfig)
    labeled_fraction: float = 0.05
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.num_images < 1 or self.num_classes < 1:
            raise ValidationError("num_images and num_classes must be positive")
        if min(self.grid_h, self.grid_w, self.base_channels, self.vfm_channels) < 1:
            raise ValidationError("grid and channel dims must be positive")
        if not (0.0 < self.labeled_fraction <= 1.0):
            raise ValidationError(f"labeled_fraction must be in (0, 1], got {self.labeled_fraction}")
        if not (0.0 <= self.eval_fraction < 1.0):
            raise ValidationError(f"eval_fraction must be in [0, 1), got {self.eval_fraction}")
        if self.labeled_fraction + self.eval_fraction > 1.0:
            raise ValidationError("labeled_fraction + eval_fraction exceeds 1")
        if not (0.0 < self.margin <= 2.0):
            raise ValidationError(f"margin must be in (0, 2], got {self.margin}")
        if self.base_channels < self.num_classes:
            raise ValidationError("base_channels must be >= num_classes for separated signatures")
        if self.vfm_channels < self.base_channels:
            raise ValidationError("vfm_channels must be >= base_channels (isometric embedding)")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ValidationError(f"bad objects_per_image range {self.objects_per_image}")
        lo, hi = self.box_size_range
        if not (1 <= lo <= hi <= min(self.grid_h, self.grid_w)):
            raise ValidationError(f"bad box_size_range {self.box_size_range}")
        lo, hi = self.distractors_per_image
        if not (0 <= lo <= hi):
            raise ValidationError(f"bad distractors_per_image range {self.distractors_per_image}")
        if self.labeled_type_coverage is not None and not (
            1 <= self.labeled_type_coverage <= self.distractor_types
        ):
            raise ValidationError(
                f"labeled_type_coverage must be in [1, {self.distractor_types}]"
            )

    def to_json(self) -> dict:
        return asdict(self)

    @staticmethod
    def from_json(doc: dict) -> "WorldConfig":
        doc = dict(doc)
        for key, cls in (("shift", ShiftConfig), ("augment", AugmentConfig), ("proposals", ProposalConfig)):
            if key in doc and isinstance(doc[key], dict):
                doc[key] = cls(**doc[key])
        for key in ("objects_per_image", "box_size_range", "distractors_per_image"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return WorldConfig(**doc)

    @staticmethod
    def from_file(path) -> "WorldConfig":
        return WorldConfig.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _class_mixing_generator(signatures: np.ndarray, dim: int) -> np.ndarray:
    """Skew generator whose rotation cyclically slides each class signature
    toward the next one."""
    c = signatures.shape[0]
    skew = np.zeros((dim, dim))
    for i in range(c):
        a = signatures[i]
        b = signatures[(i + 1) % c]
        # orthonormalize the (a -> b) plane
        b_perp = b - (a @ b) * a
        norm = np.linalg.norm(b_perp)
        if norm < 1e-12:
            continue
        b_perp = b_perp / norm
        skew += np.outer(b_perp, a) - np.outer(a, b_perp)
    return skew


def _simplex_signatures(rng: Rng, num_classes: int, dim: int) -> np.ndarray:
    """Maximally separated unit signatures: pairwise cosine -1/(C-1).

    Built from a random orthonormal frame, recentred; a single class gets one
    random unit vector.
    """
    gauss = rng.normal(size=(dim, max(num_classes, 1)))
    q, r = np.linalg.qr(gauss)
    q = q * np.sign(np.diag(r))  # fix QR sign ambiguity for determinism
    frame = q.T[:num_classes]  # (C, dim), orthonormal rows
    if num_classes == 1:
        return frame
    centered = frame - frame.mean(axis=0, keepdims=True)
    return centered / np.linalg.norm(centered, axis=1, keepdims=True)


@dataclass(frozen=True)
class DomainShift:
    """Orthogonal channel-mixing rotation plus additive Gaussian noise."""

    rotation: np.ndarray  # (d0, d0) orthogonal
    noise_sigma: float

    @staticmethod
    def from_config(
        cfg: ShiftConfig, rng: Rng, dim: int, signatures: np.ndarray | None = None
    ) -> "DomainShift":
        if cfg.angle == 0.0:
            rot = np.eye(dim)
        else:
            if cfg.mixing == "classes" and signatures is not None and signatures.shape[0] >= 2:
                skew = _class_mixing_generator(signatures, dim)
            else:
                a = rng.normal(size=(dim, dim))
                skew = (a - a.T) / 2.0
            spectral = np.linalg.norm(skew, ord=2)
            skew = skew / spectral if spectral > 0 else skew
            rot = expm(cfg.angle * skew)
        return DomainShift(rotation=rot, noise_sigma=cfg.noise_sigma)


def apply_shift(fmap: FeatureMap, shift: DomainShift, rng: Rng) -> FeatureMap:
    """Rotate every cell's channel vector and add seeded Gaussian noise."""
    data = fmap.data @ shift.rotation.T
    if shift.noise_sigma > 0:
        data = data + rng.normal(0.0, shift.noise_sigma, size=data.shape)
    return FeatureMap(data=data, stride=fmap.stride)


def strong_augment(fmap: FeatureMap, cfg: AugmentConfig, rng: Rng) -> FeatureMap:
    """Student-side view: additive noise then random channel zeroing.

    The weak (teacher-side) view is the identity. Draw order is fixed:
    noise field first, then the channel-drop mask.
    """
    data = fmap.data
    if cfg.noise_sigma > 0:
        data = data + rng.normal(0.0, cfg.noise_sigma, size=data.shape)
    else:
        data = data.copy()
    if cfg.channel_drop > 0:
        dropped = rng.uniform(size=fmap.channels) < cfg.channel_drop
        data[:, :, dropped] = 0.0
    return FeatureMap(data=data, stride=fmap.stride)


class World:
    """All deterministic artifacts derived from a WorldConfig."""

    def __init__(self, cfg: WorldConfig):
        self.cfg = cfg
        self.rng = Rng(cfg.seed, ("world",))
        self.signatures = _simplex_signatures(
            self.rng.derive("signatures"), cfg.num_classes, cfg.base_channels
        )
        self._check_separation()
        # Frozen-encoder analog: an isometric channel embedding d0 -> d shared
        # by the whole world, so clean-map geometry survives exactly.
        gauss = self.rng.derive("encoder").normal(size=(cfg.vfm_channels, cfg.base_channels))
        q, r = np.linalg.qr(gauss)
        self.encoder = q * np.sign(np.diag(r))  # (d, d0), orthonormal columns
        self.shift = DomainShift.from_config(
            cfg.shift, self.rng.derive("shift"), cfg.base_channels, self.signatures
        )
        self.distractor_bank = self._build_distractor_bank(self.rng.derive("distractors"))
        self._splits = None

    @staticmethod
    @lru_cache(maxsize=8)
    def _cached(cfg_json: str) -> "World":
        return World(WorldConfig.from_json(json.loads(cfg_json)))

    @staticmethod
    def from_config(cfg: WorldConfig) -> "World":
        return World._cached(json.dumps(cfg.to_json(), sort_keys=True))

    @property
    def vfm_signatures(self) -> np.ndarray:
        """Class signatures pushed through the frozen encoder, (C, d)."""
        return self.signatures @ self.encoder.T

    def _check_separation(self) -> None:
        sig = self.signatures
        c = sig.shape[0]
        if c < 2:
            return
        cosines = sig @ sig.T
        worst = float(np.max(cosines[~np.eye(c, dtype=bool)]))
        if worst > 1.0 - self.cfg.margin + 1e-9:
            raise ValidationError(
                f"signature separation violated: max pairwise cosine {worst:.6f} "
                f"> 1 - margin = {1.0 - self.cfg.margin:.6f} "
                f"(simplex frame reaches -1/(C-1); lower margin or num_classes)"
            )

    def image_ids(self) -> list[str]:
        width = len(str(self.cfg.num_images - 1))
        return [f"img_{i:0{width}d}" for i in range(self.cfg.num_images)]

    def splits(self) -> dict[str, str]:
        """Seeded shuffle into labeled / eval / unlabeled (cached)."""
        if self._splits is not None:
            return self._splits
        cfg = self.cfg
        ids = self.image_ids()
        order = self.rng.derive("splits").permutation(cfg.num_images)
        n_lab = int(round(cfg.labeled_fraction * cfg.num_images))
        n_eval = int(round(cfg.eval_fraction * cfg.num_images))
        out = {}
        for rank, idx in enumerate(order):
            if rank < n_lab:
                out[ids[idx]] = "labeled"
            elif rank < n_lab + n_eval:
                out[ids[idx]] = "eval"
            else:
                out[ids[idx]] = "unlabeled"
        self._splits = out
        return out

    def build_image(self, i: int):
        """Clean base map, encoder map, shifted input map, GT, proposals."""
        cfg = self.cfg
        rng = self.rng.derive("image", i)
        base = rng.normal(0.0, cfg.background_sigma, size=(cfg.grid_h, cfg.grid_w, cfg.base_channels))

        n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        cells: list[tuple[int, int, int, int]] = []
        classes: list[int] = []
        for _ in range(n_obj):
            for _attempt in range(40):
                bw = int(rng.integers(cfg.box_size_range[0], cfg.box_size_range[1] + 1))
                bh = int(rng.integers(cfg.box_size_range[0], cfg.box_size_range[1] + 1))
                c0 = int(rng.integers(0, cfg.grid_w - bw + 1))
                r0 = int(rng.integers(0, cfg.grid_h - bh + 1))
                rect = (r0, c0, r0 + bh, c0 + bw)
                if all(
                    rect[2] <= o[0] or o[2] <= rect[0] or rect[3] <= o[1] or o[3] <= rect[1]
                    for o in cells
                ):
                    cells.append(rect)
                    classes.append(int(rng.integers(0, cfg.num_classes)))
                    break

        # clutter blobs on free cells (never under an object box)
        dis_cells: list[tuple[int, int, int, int]] = []
        n_dis = 0
        if cfg.distractors_per_image[1] > 0:
            n_dis = int(
                rng.integers(cfg.distractors_per_image[0], cfg.distractors_per_image[1] + 1)
            )
        for _ in range(n_dis):
            for _attempt in range(40):
                bw = int(rng.integers(cfg.box_size_range[0], cfg.box_size_range[1] + 1))
                bh = int(rng.integers(cfg.box_size_range[0], cfg.box_size_range[1] + 1))
                c0 = int(rng.integers(0, cfg.grid_w - bw + 1))
                r0 = int(rng.integers(0, cfg.grid_h - bh + 1))
                rect = (r0, c0, r0 + bh, c0 + bw)
                if all(
                    rect[2] <= o[0] or o[2] <= rect[0] or rect[3] <= o[1] or o[3] <= rect[1]
                    for o in cells + dis_cells
                ):
                    dis_cells.append(rect)
                    break
        # one clutter type per image (scene-consistent), assigned round-robin
        # by image index within each split, so a small labeled split covers a
        # fixed subset of the types the unlabeled/eval images contain; eval
        # images additionally cycle through the eval-only (novel) types
        img_type = 0
        n_types = self.distractor_bank.shape[0]
        if n_types > 0:
            split = self.splits().get(self.image_ids()[i], "unlabeled")
            if split == "labeled":
                pool = self.cfg.labeled_type_coverage or self.cfg.distractor_types
            elif split == "eval":
                pool = n_types
            else:
                pool = self.cfg.distractor_types
            img_type = i % max(pool, 1)
        for r0, c0, r1, c1 in dis_cells:
            direction = self.distractor_bank[img_type] + cfg.distractor_jitter * rng.normal(
                size=cfg.base_channels
            )
            patch_noise = rng.normal(
                0.0, cfg.object_noise_sigma, size=(r1 - r0, c1 - c0, cfg.base_channels)
            )
            base[r0:r1, c0:c1] = cfg.distractor_amplitude * direction + patch_noise

        for (r0, c0, r1, c1), cid in zip(cells, classes):
            patch_noise = rng.normal(
                0.0, cfg.object_noise_sigma, size=(r1 - r0, c1 - c0, cfg.base_channels)
            )
            base[r0:r1, c0:c1] = cfg.signature_amplitude * self.signatures[cid] + patch_noise

        clean = FeatureMap(data=base, stride=cfg.stride)
        vfm = FeatureMap(data=base @ self.encoder.T, stride=cfg.stride)
        shifted = apply_shift(clean, self.shift, self.rng.derive("shift_noise", i))

        s = cfg.stride
        gt = [
            Detection(box=Box(c0 * s, r0 * s, c1 * s, r1 * s), class_id=cid)
            for (r0, c0, r1, c1), cid in zip(cells, classes)
        ]
        dis_boxes = [Box(c0 * s, r0 * s, c1 * s, r1 * s) for (r0, c0, r1, c1) in dis_cells]
        proposals = self._make_proposals(gt, dis_boxes, rng.derive("proposals"))
        return clean, vfm, shifted, gt, proposals

    def _build_distractor_bank(self, rng: Rng) -> np.ndarray:
        """Per-world clutter directions that confuse the shifted view only.

        Each direction d is tuned so that its domain-shifted image R d has
        cosine ~0.65 to some class signature (a source-trained linear scorer
        sees it as object-like), while d itself stays away from every
        signature (the stored encoder map and the prototypes separate it).
        """
        bank = []
        rot_t = self.shift.rotation.T
        total = self.cfg.distractor_types + self.cfg.novel_distractor_types
        for t in range(total):
            v = rng.normal(size=self.cfg.base_channels)
            v = v / np.linalg.norm(v)
            for _attempt in range(400):
                shifted_cos = self.signatures @ (rot_t.T @ v)
                clean_cos = self.signatures @ v
                hi = float(np.max(shifted_cos))
                worst_clean = float(np.max(np.abs(clean_cos)))
                if 0.6 <= hi <= 0.7 and worst_clean <= 0.45:
                    break
                if hi < 0.6 or hi > 0.7:
                    # nudge the shifted image toward/away from its best class
                    target = rot_t @ self.signatures[int(np.argmax(shifted_cos))]
                    v = v + (0.05 if hi < 0.6 else -0.05) * target
                if worst_clean > 0.45:
                    near = self.signatures[int(np.argmax(np.abs(clean_cos)))]
                    sign = np.sign(float(near @ v))
                    v = v - 0.05 * sign * near
                v = v / np.linalg.norm(v)
            bank.append(v)
        return np.stack(bank) if bank else np.zeros((0, self.cfg.base_channels))

    def _jittered(self, box: Box, rng: Rng) -> Box:
        cfg = self.cfg
        s = cfg.stride
        w_px = cfg.grid_w * s
        h_px = cfg.grid_h * s
        min_side = s  # keep proposals at least one cell wide
        for _attempt in range(20):
            jit = rng.normal(0.0, cfg.proposals.jitter_sigma * s, size=4)
            x1 = min(max(box.x1 + jit[0], 0.0), w_px - min_side)
            y1 = min(max(box.y1 + jit[1], 0.0), h_px - min_side)
            x2 = max(min(box.x2 + jit[2], w_px), x1 + min_side)
            y2 = max(min(box.y2 + jit[3], h_px), y1 + min_side)
            cand = Box(x1, y1, x2, y2)
            if iou(cand, box) >= 0.5:
                return cand
        return box

    def _make_proposals(self, gt: list[Detection], distractors: list[Box], rng: Rng) -> list[Box]:
        """Jittered GT boxes, boxes on salient clutter, then random negatives."""
        cfg = self.cfg
        s = cfg.stride
        w_px = cfg.grid_w * s
        h_px = cfg.grid_h * s
        out: list[Box] = []
        for det in gt:
            out.append(self._jittered(det.box, rng))
        gt_boxes = [d.box for d in gt]
        for box in distractors:
            cand = self._jittered(box, rng)
            if all(iou(cand, g) < cfg.proposals.negative_max_iou for g in gt_boxes):
                out.append(cand)
        for _ in range(cfg.proposals.negatives_per_image):
            for _attempt in range(50):
                bw = int(rng.integers(cfg.box_size_range[0], cfg.box_size_range[1] + 1)) * s
                bh = int(rng.integers(cfg.box_size_range[0], cfg.box_size_range[1] + 1)) * s
                x1 = float(rng.uniform(0.0, w_px - bw))
                y1 = float(rng.uniform(0.0, h_px - bh))
                cand = Box(x1, y1, x1 + bw, y1 + bh)
                if all(iou(cand, g) < cfg.proposals.negative_max_iou for g in gt_boxes):
                    out.append(cand)
                    break
        return out


def generate_world(cfg: WorldConfig, out_dir, workers: int = 1) -> DatasetIndex:
    """Materialize a world on disk: .vgfm maps plus index.json; returns the index."""
    out_dir = Path(out_dir)
    (out_dir / "maps").mkdir(parents=True, exist_ok=True)
    world = World.from_config(cfg)
    ids = world.image_ids()

    if workers > 1:
        from multiprocessing import Pool

        cfg_json = json.dumps(cfg.to_json(), sort_keys=True)
        with Pool(workers) as pool:
            results = pool.map(_image_job, [(cfg_json, i) for i in range(cfg.num_images)])
    else:
        results = [world.build_image(i) for i in range(cfg.num_images)]

    images = []
    annotations = {}
    proposals = {}
    for i, (image_id, (_clean, vfm, shifted, gt, props)) in enumerate(zip(ids, results)):
        vfm_rel = f"maps/{image_id}.vfm.vgfm"
        input_rel = f"maps/{image_id}.input.vgfm"
        write_feature_map(out_dir / vfm_rel, vfm)
        write_feature_map(out_dir / input_rel, shifted)
        images.append(
            ImageRecord(
                image_id=image_id,
                vfm_file=vfm_rel,
                input_file=input_rel,
                width=cfg.grid_w * cfg.stride,
                height=cfg.grid_h * cfg.stride,
                stride=cfg.stride,
            )
        )
        annotations[image_id] = gt
        proposals[image_id] = props

    index = DatasetIndex(
        images=images,
        annotations=annotations,
        splits=world.splits(),
        num_classes=cfg.num_classes,
        proposals=proposals,
        root=out_dir,
    )
    write_dataset(out_dir / "index.json", index)
    return index


def _image_job(args):
    cfg_json, i = args
    world = World._cached(cfg_json)
    return world.build_image(i)
