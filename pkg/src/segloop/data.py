"""Annotation data model, COCO-compatible persistence, and dataset partitioning.

The on-disk format is a UTF-8 JSON object with the COCO keys ``images``,
``annotations`` and ``categories`` plus two extensions: per-annotation
``source``/``confidence`` keys and a top-level ``partitions`` block mapping
partition names to image id lists. ``segmentation`` accepts either a polygon
list or an uncompressed RLE object ``{"size": [h, w], "counts": [...]}``;
polygons are rasterized to RLE on load and everything is written back as RLE.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    GeometryError,
    LengthError,
    ParseError,
    PartitionError,
    SchemaError,
    StorageError,
)
from .masks import BinaryMask, RLEMask, rasterize_polygon, rle_decode, rle_encode, tight_bbox

DEFAULT_MAX_PIXELS = 1 << 26


class Partition(str, Enum):
    BOOTSTRAPPING = "bootstrapping"
    TRAINING = "training"
    TESTING = "testing"


@dataclass(frozen=True)
class CategoryDef:
    id: int
    name: str

    def __post_init__(self) -> None:
        if self.id < 1:
            raise ValueError(f"category id must be positive, got {self.id}")
        if not self.name:
            raise ValueError("category name must be non-empty")


@dataclass(frozen=True)
class ImageRecord:
    id: int
    width: int
    height: int
    file_path: str

    def __post_init__(self) -> None:
        if self.id < 1:
            raise ValueError(f"image id must be positive, got {self.id}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image {self.id} has empty dimensions")


@dataclass(frozen=True)
class Source:
    """Provenance of an annotation: human-made or promoted at some iteration."""

    kind: str
    iteration: int | None = None

    HUMAN = "human"
    INFERRED = "inferred"

    def __post_init__(self) -> None:
        if self.kind not in (self.HUMAN, self.INFERRED):
            raise ValueError(f"unknown source kind {self.kind!r}")
        if self.kind == self.INFERRED and (self.iteration is None or self.iteration < 0):
            raise ValueError("inferred source needs a non-negative iteration")
        if self.kind == self.HUMAN and self.iteration is not None:
            raise ValueError("human source carries no iteration")

    @property
    def is_human(self) -> bool:
        return self.kind == self.HUMAN

    @classmethod
    def human(cls) -> "Source":
        return cls(cls.HUMAN)

    @classmethod
    def inferred(cls, iteration: int) -> "Source":
        return cls(cls.INFERRED, iteration)

    def encode(self) -> str:
        if self.is_human:
            return self.HUMAN
        return f"{self.INFERRED}:{self.iteration}"

    @classmethod
    def parse(cls, text: str) -> "Source":
        if text == cls.HUMAN:
            return cls.human()
        if text.startswith(cls.INFERRED + ":"):
            try:
                return cls.inferred(int(text.split(":", 1)[1]))
            except ValueError as exc:
                raise ValueError(f"bad source string {text!r}") from exc
        raise ValueError(f"bad source string {text!r}")


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    category_id: int
    mask: RLEMask
    area: int
    bbox: tuple[int, int, int, int]
    source: Source
    confidence: float

    def __post_init__(self) -> None:
        if self.id < 1:
            raise ValueError(f"annotation id must be positive, got {self.id}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.source.is_human and self.confidence != 1.0:
            raise ValueError("human annotations carry confidence 1.0")
        decoded = rle_decode(self.mask)
        if decoded.area != self.area:
            raise ValueError(f"annotation {self.id}: area {self.area} != mask area {decoded.area}")
        if decoded.area == 0:
            raise ValueError(f"annotation {self.id}: empty mask")
        if tuple(self.bbox) != tight_bbox(decoded):
            raise ValueError(
                f"annotation {self.id}: bbox {self.bbox} is not the tight box "
                f"{tight_bbox(decoded)}"
            )
        object.__setattr__(self, "bbox", tuple(int(v) for v in self.bbox))


def annotation_from_mask(
    ann_id: int,
    image_id: int,
    category_id: int,
    mask: BinaryMask | RLEMask,
    source: Source,
    confidence: float,
) -> Annotation:
    """Build an annotation with area/bbox derived from the mask."""
    dense = mask if isinstance(mask, BinaryMask) else rle_decode(mask)
    return Annotation(
        id=ann_id,
        image_id=image_id,
        category_id=category_id,
        mask=rle_encode(dense),
        area=dense.area,
        bbox=tight_bbox(dense),
        source=source,
        confidence=confidence,
    )


@dataclass(frozen=True)
class Detection:
    """One predicted instance."""

    image_id: int
    category_id: int
    mask: RLEMask
    confidence: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")
        if self.mask.area == 0:
            raise ValueError("detection mask is empty")


@dataclass(frozen=True)
class AnnotatedDataset:
    categories: tuple[CategoryDef, ...]
    images: tuple[ImageRecord, ...]
    annotations: tuple[Annotation, ...]
    partition_of: Mapping[int, Partition] = field(default_factory=dict)
    images_root: Path | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))
        object.__setattr__(self, "partition_of", dict(self.partition_of))
        validate_dataset(self)

    # -- lookups ------------------------------------------------------------

    def image_by_id(self, image_id: int) -> ImageRecord:
        return {im.id: im for im in self.images}[image_id]

    def annotations_for(self, image_id: int) -> tuple[Annotation, ...]:
        return tuple(a for a in self.annotations if a.image_id == image_id)

    def partition(self, image_id: int) -> Partition:
        return self.partition_of.get(image_id, Partition.TRAINING)

    # -- partition views ----------------------------------------------------

    def bootstrap_image_ids(self) -> tuple[int, ...]:
        return tuple(
            im.id for im in self.images if self.partition(im.id) is Partition.BOOTSTRAPPING
        )

    def training_image_ids(self, include_bootstrap: bool = True) -> tuple[int, ...]:
        """Images the loop runs inference on. Bootstrapping images belong to
        the training set by default; pass ``include_bootstrap=False`` to
        exclude them."""
        keep = {Partition.TRAINING}
        if include_bootstrap:
            keep.add(Partition.BOOTSTRAPPING)
        return tuple(im.id for im in self.images if self.partition(im.id) in keep)

    def testing_image_ids(self) -> tuple[int, ...]:
        return tuple(im.id for im in self.images if self.partition(im.id) is Partition.TESTING)

    def partition_counts(self) -> tuple[int, int, int]:
        """(bootstrapping, training incl. bootstrap, testing) image counts."""
        return (
            len(self.bootstrap_image_ids()),
            len(self.training_image_ids()),
            len(self.testing_image_ids()),
        )


def validate_dataset(dataset: AnnotatedDataset, max_pixels: int = DEFAULT_MAX_PIXELS) -> None:
    """Check referential integrity and mask geometry; raise on violation."""
    cat_ids = [c.id for c in dataset.categories]
    if len(set(cat_ids)) != len(cat_ids):
        raise SchemaError("duplicate category ids")
    image_by_id = {}
    for im in dataset.images:
        if im.id in image_by_id:
            raise SchemaError(f"duplicate image id {im.id}")
        if im.width * im.height > max_pixels:
            raise SchemaError(f"image {im.id} exceeds the {max_pixels}-pixel cap")
        image_by_id[im.id] = im
    cat_set = set(cat_ids)
    seen_ann = set()
    for ann in dataset.annotations:
        if ann.id in seen_ann:
            raise SchemaError(f"duplicate annotation id {ann.id}")
        seen_ann.add(ann.id)
        if ann.image_id not in image_by_id:
            raise SchemaError(f"annotation {ann.id} references unknown image {ann.image_id}")
        if ann.category_id not in cat_set:
            raise SchemaError(
                f"annotation {ann.id} references unknown category {ann.category_id}"
            )
        im = image_by_id[ann.image_id]
        if (ann.mask.height, ann.mask.width) != (im.height, im.width):
            raise GeometryError(
                f"annotation {ann.id}: mask {ann.mask.height}x{ann.mask.width} does not "
                f"match image {im.id} ({im.height}x{im.width})"
            )
    for image_id in dataset.partition_of:
        if image_id not in image_by_id:
            raise SchemaError(f"partition entry for unknown image {image_id}")


# -- partitioning -----------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    """Image ids per partition. Bootstrapping ids may repeat in training;
    testing must be disjoint from both."""

    bootstrapping: tuple[int, ...] = ()
    training: tuple[int, ...] = ()
    testing: tuple[int, ...] = ()


def make_partitions(dataset: AnnotatedDataset, spec: PartitionSpec) -> AnnotatedDataset:
    """Relabel partitions and strip annotations accordingly.

    Bootstrapping images keep only their human annotations; training images
    outside the bootstrapping set lose all annotations (they enter the loop
    unlabeled); testing images keep full ground truth.
    """
    known = {im.id for im in dataset.images}
    listed = set(spec.bootstrapping) | set(spec.training) | set(spec.testing)
    unknown = listed - known
    if unknown:
        raise PartitionError(f"unknown image ids {sorted(unknown)}")
    overlap = set(spec.testing) & (set(spec.bootstrapping) | set(spec.training))
    if overlap:
        raise PartitionError(f"testing overlaps other partitions on {sorted(overlap)}")

    partition_of: dict[int, Partition] = {}
    for image_id in spec.training:
        partition_of[image_id] = Partition.TRAINING
    for image_id in spec.bootstrapping:
        partition_of[image_id] = Partition.BOOTSTRAPPING
    for image_id in spec.testing:
        partition_of[image_id] = Partition.TESTING

    def keep(ann: Annotation) -> bool:
        part = partition_of.get(ann.image_id, Partition.TRAINING)
        if part is Partition.TESTING:
            return True
        if part is Partition.BOOTSTRAPPING:
            return ann.source.is_human
        return False

    return replace(
        dataset,
        annotations=tuple(a for a in dataset.annotations if keep(a)),
        partition_of=partition_of,
    )


# -- persistence --------------------------------------------------------------


def _require(obj: Mapping, key: str, context: str):
    if key not in obj:
        raise SchemaError(f"{context}: missing required key {key!r}")
    return obj[key]


def _segmentation_to_rle(seg, image: ImageRecord) -> RLEMask:
    if isinstance(seg, Mapping):
        size = _require(seg, "size", "segmentation")
        counts = _require(seg, "counts", "segmentation")
        if len(size) != 2:
            raise SchemaError(f"segmentation size must be [h, w], got {size}")
        h, w = int(size[0]), int(size[1])
        if (h, w) != (image.height, image.width):
            raise GeometryError(
                f"segmentation {h}x{w} does not match image {image.id} "
                f"({image.height}x{image.width})"
            )
        try:
            return RLEMask(h, w, tuple(int(c) for c in counts))
        except (LengthError, ValueError, TypeError) as exc:
            raise SchemaError(f"bad RLE counts: {exc}") from exc
    if isinstance(seg, Sequence):
        combined = np.zeros((image.height, image.width), dtype=bool)
        for part in seg:
            if not isinstance(part, Sequence) or len(part) < 6 or len(part) % 2:
                raise SchemaError("polygon part must be a flat [x0,y0,x1,y1,...] list")
            vertices = [(float(part[i]), float(part[i + 1])) for i in range(0, len(part), 2)]
            combined |= rasterize_polygon(vertices, image.height, image.width).pixels
        return rle_encode(BinaryMask(combined))
    raise SchemaError(f"unsupported segmentation value of type {type(seg).__name__}")


def load_coco(path: str | Path, max_pixels: int = DEFAULT_MAX_PIXELS) -> AnnotatedDataset:
    """Load a dataset file, validating all invariants.

    Polygon segmentations are rasterized; ``area`` and ``bbox`` are recomputed
    from the mask so files produced by other tools (where polygon area is
    geometric, not pixel-counted) load cleanly. Images absent from the
    optional ``partitions`` block default to the training partition.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"{path}: top level must be an object")

    try:
        categories = tuple(
            CategoryDef(int(_require(c, "id", "category")), str(_require(c, "name", "category")))
            for c in _require(raw, "categories", str(path))
        )
        images = tuple(
            ImageRecord(
                id=int(_require(im, "id", "image")),
                width=int(_require(im, "width", "image")),
                height=int(_require(im, "height", "image")),
                file_path=str(_require(im, "file_name", "image")),
            )
            for im in _require(raw, "images", str(path))
        )
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc)) from exc

    image_by_id = {im.id: im for im in images}
    annotations = []
    for entry in _require(raw, "annotations", str(path)):
        ctx = f"annotation {entry.get('id', '?')}"
        image_id = int(_require(entry, "image_id", ctx))
        if image_id not in image_by_id:
            raise SchemaError(f"{ctx}: unknown image {image_id}")
        rle = _segmentation_to_rle(_require(entry, "segmentation", ctx), image_by_id[image_id])
        try:
            source = Source.parse(str(entry.get("source", Source.HUMAN)))
            confidence = float(entry.get("confidence", 1.0))
            annotations.append(
                annotation_from_mask(
                    ann_id=int(_require(entry, "id", ctx)),
                    image_id=image_id,
                    category_id=int(_require(entry, "category_id", ctx)),
                    mask=rle,
                    source=source,
                    confidence=confidence,
                )
            )
        except (ValueError, TypeError) as exc:
            raise SchemaError(f"{ctx}: {exc}") from exc

    partition_of: dict[int, Partition] = {}
    blocks = raw.get("partitions", {})
    if not isinstance(blocks, Mapping):
        raise SchemaError("partitions must map partition names to image id lists")
    valid_names = {p.value for p in Partition}
    unknown_names = set(blocks) - valid_names
    if unknown_names:
        raise SchemaError(f"unknown partition names {sorted(unknown_names)}")
    listed: dict[str, set[int]] = {
        name: {int(i) for i in blocks.get(name, [])} for name in valid_names
    }
    for name, ids in listed.items():
        dangling = ids - set(image_by_id)
        if dangling:
            raise SchemaError(f"partition {name!r} lists unknown images {sorted(dangling)}")
    testing_overlap = listed["testing"] & (listed["bootstrapping"] | listed["training"])
    if testing_overlap:
        raise SchemaError(f"testing overlaps other partitions on {sorted(testing_overlap)}")
    # bootstrapping wins over training: those images belong to both sets
    for image_id in listed["training"]:
        partition_of[image_id] = Partition.TRAINING
    for image_id in listed["bootstrapping"]:
        partition_of[image_id] = Partition.BOOTSTRAPPING
    for image_id in listed["testing"]:
        partition_of[image_id] = Partition.TESTING

    try:
        return AnnotatedDataset(
            categories=categories,
            images=images,
            annotations=tuple(annotations),
            partition_of=partition_of,
            images_root=path.parent,
        )
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc)) from exc


def dataset_to_mapping(dataset: AnnotatedDataset) -> dict:
    """Serializable form with sorted ids and fixed key order."""
    partitions = {
        name.value: sorted(i for i, p in dataset.partition_of.items() if p is name)
        for name in (Partition.BOOTSTRAPPING, Partition.TRAINING, Partition.TESTING)
    }
    return {
        "categories": [
            {"id": c.id, "name": c.name} for c in sorted(dataset.categories, key=lambda c: c.id)
        ],
        "images": [
            {"id": im.id, "width": im.width, "height": im.height, "file_name": im.file_path}
            for im in sorted(dataset.images, key=lambda im: im.id)
        ],
        "annotations": [
            {
                "id": a.id,
                "image_id": a.image_id,
                "category_id": a.category_id,
                "segmentation": {
                    "size": [a.mask.height, a.mask.width],
                    "counts": list(a.mask.counts),
                },
                "area": a.area,
                "bbox": list(a.bbox),
                "source": a.source.encode(),
                "confidence": a.confidence,
            }
            for a in sorted(dataset.annotations, key=lambda a: a.id)
        ],
        "partitions": partitions,
    }


def save_coco(dataset: AnnotatedDataset, path: str | Path) -> None:
    """Write the dataset; output bytes are deterministic for a given dataset."""
    path = Path(path)
    text = json.dumps(dataset_to_mapping(dataset), indent=2, ensure_ascii=True) + "\n"
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


# -- detection files ----------------------------------------------------------


def save_detections(detections: Iterable[Detection], path: str | Path) -> None:
    payload = {
        "detections": [
            {
                "image_id": d.image_id,
                "category_id": d.category_id,
                "segmentation": {
                    "size": [d.mask.height, d.mask.width],
                    "counts": list(d.mask.counts),
                },
                "confidence": d.confidence,
            }
            for d in detections
        ]
    }
    try:
        Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def load_detections(path: str | Path) -> list[Detection]:
    """Read detections from a detections file, or from a dataset file (its
    annotations become detections carrying their stored confidence)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if isinstance(raw, dict) and "detections" in raw:
        out = []
        for entry in raw["detections"]:
            seg = _require(entry, "segmentation", "detection")
            try:
                rle = RLEMask(
                    int(seg["size"][0]), int(seg["size"][1]), tuple(int(c) for c in seg["counts"])
                )
                out.append(
                    Detection(
                        image_id=int(_require(entry, "image_id", "detection")),
                        category_id=int(_require(entry, "category_id", "detection")),
                        mask=rle,
                        confidence=float(_require(entry, "confidence", "detection")),
                    )
                )
            except (ValueError, TypeError, LengthError) as exc:
                raise SchemaError(f"bad detection entry: {exc}") from exc
        return out
    dataset = load_coco(path)
    return [
        Detection(a.image_id, a.category_id, a.mask, a.confidence) for a in dataset.annotations
    ]
