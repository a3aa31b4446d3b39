"""Bit-exact persistence for feature maps, datasets, prototypes and run logs.

Formats (full field-level description in docs/FORMATS.md):

* ``.vgfm``   binary feature map: magic ``VGFM``, u32 version=1, u32 height,
              u32 width, u32 channels, f32 stride, then float32 little-endian
              payload in row-major (h, w, c) order.
* ``index.json``       dataset index (images, annotations, splits, proposals).
* ``prototypes.json``  per-class K x d reference centroids, background last.
* ``runlog.jsonl``     one JSON object per training step.

JSON writers use sorted keys and Python's shortest round-trip float repr, so
re-serializing identical state is byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Box, FeatureMap
from .errors import FormatError, ValidationError

MAGIC = b"VGFM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIIIIf")  # magic, version, h, w, c, stride
SCHEMA_VERSION = 1
SPLITS = ("labeled", "unlabeled", "eval")

# Maximum per-dimension size accepted by readers; guards against allocating
# from a corrupt header.
_MAX_DIM = 1 << 20
_MAX_ELEMENTS = 1 << 31


def write_feature_map(path, fmap: FeatureMap) -> None:
    """Serialize a feature map; in-memory f64 values are stored as f32."""
    payload = fmap.data.astype("<f4").tobytes(order="C")
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION, fmap.height, fmap.width, fmap.channels, fmap.stride
    )
    Path(path).write_bytes(header + payload)


def read_feature_map(path) -> FeatureMap:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)", offset=len(raw))
    magic, version, h, w, c, stride = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}", offset=4)
    if not (0 < h <= _MAX_DIM and 0 < w <= _MAX_DIM and 0 < c <= _MAX_DIM):
        raise FormatError(f"{path}: implausible dimensions {(h, w, c)}", offset=8)
    n = h * w * c
    if n > _MAX_ELEMENTS:
        raise FormatError(f"{path}: dimension overflow {(h, w, c)}", offset=8)
    expected = _HEADER.size + 4 * n
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload length {len(raw) - _HEADER.size} != {4 * n}",
            offset=min(len(raw), expected),
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(h, w, c)
    return FeatureMap(data=data.astype(np.float64), stride=float(stride))


@dataclass(frozen=True)
class Detection:
    """A box with a class id; `score` is None for ground-truth annotations.

    `class_id` is a foreground id in [0, C) or the background sentinel C.
    `source` is free-form provenance (e.g. "teacher") used by the trainer.
    """

    box: Box
    class_id: int
    score: float | None = None
    source: str | None = None

    def __post_init__(self):
        if self.class_id < 0:
            raise ValidationError(f"class_id must be >= 0, got {self.class_id}")
        if self.score is not None and not (0.0 <= self.score <= 1.0):
            raise ValidationError(f"score must be in [0, 1], got {self.score}")

    def to_json(self) -> dict:
        d = {
            "box": [self.box.x1, self.box.y1, self.box.x2, self.box.y2],
            "class_id": int(self.class_id),
        }
        if self.score is not None:
            d["score"] = float(self.score)
        return d

    @staticmethod
    def from_json(d: dict) -> "Detection":
        x1, y1, x2, y2 = d["box"]
        return Detection(
            box=Box(x1, y1, x2, y2),
            class_id=int(d["class_id"]),
            score=d.get("score"),
        )


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    vfm_file: str  # stored frozen-encoder features of the clean image
    input_file: str  # shifted-domain map the detector actually sees
    width: float
    height: float
    stride: float


@dataclass
class DatasetIndex:
    """Validated view of index.json. Images are sorted by image_id."""

    images: list[ImageRecord]
    annotations: dict[str, list[Detection]]
    splits: dict[str, str]  # image_id -> labeled | unlabeled | eval
    num_classes: int
    proposals: dict[str, list[Box]] = field(default_factory=dict)
    root: Path | None = None

    @property
    def background_id(self) -> int:
        return self.num_classes

    def image_ids(self, split: str | None = None) -> list[str]:
        ids = [im.image_id for im in self.images]
        if split is None:
            return ids
        return [i for i in ids if self.splits.get(i) == split]

    def record(self, image_id: str) -> ImageRecord:
        return self._by_id[image_id]

    def resolve(self, rel: str) -> Path:
        return (self.root / rel) if self.root is not None else Path(rel)

    def load_vfm_map(self, image_id: str) -> FeatureMap:
        return read_feature_map(self.resolve(self.record(image_id).vfm_file))

    def load_input_map(self, image_id: str) -> FeatureMap:
        return read_feature_map(self.resolve(self.record(image_id).input_file))

    def __post_init__(self):
        self.images = sorted(self.images, key=lambda im: im.image_id)
        self._by_id = {im.image_id: im for im in self.images}
        self.validate()

    def validate(self) -> None:
        ids = [im.image_id for im in self.images]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValidationError(f"duplicate image ids: {dupes}")
        known = set(ids)
        if self.num_classes < 1:
            raise ValidationError(f"num_classes must be >= 1, got {self.num_classes}")
        bad = sorted(set(self.annotations) - known)
        if bad:
            raise ValidationError(f"annotations reference unknown image ids: {bad}")
        bad = sorted(set(self.splits) - known)
        if bad:
            raise ValidationError(f"splits reference unknown image ids: {bad}")
        bad = sorted(set(self.proposals) - known)
        if bad:
            raise ValidationError(f"proposals reference unknown image ids: {bad}")
        missing = sorted(known - set(self.splits))
        if missing:
            raise ValidationError(f"images missing a split assignment: {missing}")
        for image_id, split in self.splits.items():
            if split not in SPLITS:
                raise ValidationError(f"{image_id}: unknown split {split!r}")
        offending = sorted(
            i
            for i, dets in self.annotations.items()
            for d in dets
            if d.class_id >= self.num_classes
        )
        if offending:
            raise ValidationError(
                f"annotations with class_id >= num_classes={self.num_classes}: {offending}"
            )

    def to_json(self) -> dict:
        split_lists = {name: [] for name in SPLITS}
        for im in self.images:
            split_lists[self.splits[im.image_id]].append(im.image_id)
        return {
            "schema_version": SCHEMA_VERSION,
            "num_classes": self.num_classes,
            "images": [
                {
                    "image_id": im.image_id,
                    "vfm_file": im.vfm_file,
                    "input_file": im.input_file,
                    "width": im.width,
                    "height": im.height,
                    "stride": im.stride,
                }
                for im in self.images
            ],
            "annotations": {
                i: [d.to_json() for d in dets]
                for i, dets in sorted(self.annotations.items())
            },
            "splits": split_lists,
            "proposals": {
                i: [[b.x1, b.y1, b.x2, b.y2] for b in boxes]
                for i, boxes in sorted(self.proposals.items())
            },
        }


def write_dataset(path, index: DatasetIndex) -> None:
    _write_json(path, index.to_json())


def load_dataset(index_path, check_files: bool = True) -> DatasetIndex:
    """Parse and eagerly validate an index.json next to its feature files."""
    index_path = Path(index_path)
    doc = _read_json(index_path)
    _require_schema(doc, index_path)
    try:
        images = [
            ImageRecord(
                image_id=str(im["image_id"]),
                vfm_file=str(im["vfm_file"]),
                input_file=str(im["input_file"]),
                width=float(im["width"]),
                height=float(im["height"]),
                stride=float(im["stride"]),
            )
            for im in doc["images"]
        ]
        annotations = {
            str(i): [Detection.from_json(d) for d in dets]
            for i, dets in doc.get("annotations", {}).items()
        }
        split_lists = doc["splits"]
        proposals = {
            str(i): [Box(*b) for b in boxes]
            for i, boxes in doc.get("proposals", {}).items()
        }
        num_classes = int(doc["num_classes"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{index_path}: malformed index ({exc!r})") from exc

    splits: dict[str, str] = {}
    for name in SPLITS:
        for image_id in split_lists.get(name, []):
            if image_id in splits:
                raise ValidationError(
                    f"image {image_id!r} assigned to both "
                    f"{splits[image_id]!r} and {name!r} splits"
                )
            splits[image_id] = name

    index = DatasetIndex(
        images=images,
        annotations=annotations,
        splits=splits,
        num_classes=num_classes,
        proposals=proposals,
        root=index_path.parent,
    )
    if check_files:
        missing = [
            im.image_id
            for im in index.images
            if not index.resolve(im.vfm_file).is_file()
            or not index.resolve(im.input_file).is_file()
        ]
        if missing:
            raise ValidationError(f"feature files missing for images: {missing}")
    return index


@dataclass
class ClassPrototypes:
    centroids: np.ndarray  # (K, d)
    counts: np.ndarray  # (K,) members per centroid
    present: bool = True


@dataclass
class PrototypeSet:
    """Per-class reference centroids; key num_classes is the background class."""

    channels: int
    components: int
    classes: dict[int, ClassPrototypes]
    num_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def background_id(self) -> int:
        return self.num_classes

    def foreground_ids(self) -> list[int]:
        return list(range(self.num_classes))

    def validate(self) -> None:
        expected = set(range(self.num_classes + 1))
        if set(self.classes) != expected:
            raise ValidationError(
                f"prototype set must cover classes {sorted(expected)} "
                f"(background={self.num_classes} included), got {sorted(self.classes)}"
            )
        for cid, proto in self.classes.items():
            if not proto.present:
                continue
            if proto.centroids.shape != (self.components, self.channels):
                raise ValidationError(
                    f"class {cid}: centroids shape {proto.centroids.shape} != "
                    f"({self.components}, {self.channels})"
                )
            if not np.isfinite(proto.centroids).all():
                raise ValidationError(f"class {cid}: non-finite centroid")

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "channels": self.channels,
            "components": self.components,
            "num_classes": self.num_classes,
            "classes": {
                str(cid): {
                    "present": proto.present,
                    "centroids": proto.centroids.tolist(),
                    "counts": [int(v) for v in proto.counts],
                }
                for cid, proto in sorted(self.classes.items())
            },
            "metadata": self.metadata,
        }


def write_prototypes(path, protos: PrototypeSet) -> None:
    _write_json(path, protos.to_json())


def read_prototypes(path) -> PrototypeSet:
    doc = _read_json(Path(path))
    _require_schema(doc, path)
    try:
        classes = {
            int(cid): ClassPrototypes(
                centroids=np.asarray(entry["centroids"], dtype=np.float64),
                counts=np.asarray(entry["counts"], dtype=np.int64),
                present=bool(entry["present"]),
            )
            for cid, entry in doc["classes"].items()
        }
        return PrototypeSet(
            channels=int(doc["channels"]),
            components=int(doc["components"]),
            classes=classes,
            num_classes=int(doc["num_classes"]),
            metadata=doc.get("metadata", {}),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed prototype file ({exc!r})") from exc


def append_runlog(fh, record: dict) -> None:
    """Append one step record to an open runlog.jsonl handle."""
    fh.write(json.dumps(record, sort_keys=True) + "\n")


def read_runlog(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{line_no + 1}: bad JSON line ({exc})") from exc
    return records


def _write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def _require_schema(doc, path) -> None:
    if not isinstance(doc, dict) or doc.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(
            f"{path}: missing or unsupported schema_version "
            f"{doc.get('schema_version') if isinstance(doc, dict) else doc!r}"
        )
