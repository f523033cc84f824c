"""Binary-mask geometry: run-length coding, polygon rasterization, IoU, NMS.

Masks are dense boolean grids addressed (row, column). The run-length form
stores counts of alternating 0/1 runs in column-major pixel order, always
starting with a (possibly zero-length) run of zeros, matching the common
COCO interchange convention with uncompressed integer counts.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

from .errors import (
    DegenerateError,
    DimensionError,
    EmptyError,
    LengthError,
    MixedImageError,
)

if TYPE_CHECKING:
    from .data import Detection


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Dense binary mask; ``pixels`` is a bool array of shape (height, width)."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        px = np.asarray(self.pixels, dtype=bool)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise DimensionError(f"mask must be a non-empty 2-d grid, got shape {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def area(self) -> int:
        return int(self.pixels.sum())

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(
            np.array_equal(self.pixels, other.pixels)
        )

    __hash__ = None  # type: ignore[assignment]

    @classmethod
    def zeros(cls, height: int, width: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class RLEMask:
    """Column-major run-length mask. ``counts[0]`` is a zero-run and may be 0."""

    height: int
    width: int
    counts: tuple[int, ...]

    def __post_init__(self) -> None:
        counts = tuple(int(c) for c in self.counts)
        object.__setattr__(self, "counts", counts)
        if self.height < 1 or self.width < 1:
            raise DimensionError(f"invalid mask dimensions {self.height}x{self.width}")
        if any(c < 0 for c in counts):
            raise ValueError(f"negative run length in {counts}")
        if any(c == 0 for c in counts[1:]):
            raise ValueError("zero-length run after the first count")
        total = sum(counts)
        if total != self.height * self.width:
            raise LengthError(
                f"counts sum to {total}, expected {self.height * self.width} "
                f"for a {self.height}x{self.width} mask"
            )

    @property
    def area(self) -> int:
        """Number of set pixels (sum of the odd-indexed runs)."""
        return sum(self.counts[1::2])

    def decode(self) -> BinaryMask:
        return rle_decode(self)


def rle_encode(mask: BinaryMask) -> RLEMask:
    """Encode a dense mask into minimal alternating column-major runs."""
    flat = mask.pixels.ravel(order="F")
    boundaries = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs = [0] + runs
    return RLEMask(mask.height, mask.width, tuple(int(r) for r in runs))


def rle_decode(rle: RLEMask) -> BinaryMask:
    """Inverse of :func:`rle_encode`."""
    values = np.arange(len(rle.counts)) % 2
    flat = np.repeat(values, rle.counts).astype(bool)
    return BinaryMask(flat.reshape((rle.height, rle.width), order="F"))


def tight_bbox(mask: BinaryMask) -> tuple[int, int, int, int]:
    """Tight (x, y, w, h) bounding box of the set pixels."""
    if mask.area == 0:
        raise EmptyError("bounding box of an empty mask")
    rows = np.flatnonzero(mask.pixels.any(axis=1))
    cols = np.flatnonzero(mask.pixels.any(axis=0))
    x, y = int(cols[0]), int(rows[0])
    return (x, y, int(cols[-1]) - x + 1, int(rows[-1]) - y + 1)


def rasterize_polygon(
    vertices: Sequence[tuple[float, float]], height: int, width: int
) -> BinaryMask:
    """Rasterize a simple polygon: a pixel is set iff its center (x+0.5, y+0.5)
    lies inside under the even-odd rule; centers exactly on an edge count as
    inside.
    """
    if len(vertices) < 3:
        raise DegenerateError(f"polygon needs >=3 vertices, got {len(vertices)}")
    vx = np.asarray([v[0] for v in vertices], dtype=float)
    vy = np.asarray([v[1] for v in vertices], dtype=float)
    # shoelace area; collinear vertices give exactly zero
    area2 = float(np.sum(vx * np.roll(vy, -1) - np.roll(vx, -1) * vy))
    if abs(area2) <= 1e-12:
        raise DegenerateError("polygon has zero area")

    px, py = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    inside = np.zeros((height, width), dtype=bool)
    on_edge = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    for j in range(n):
        x1, y1 = vx[j], vy[j]
        x2, y2 = vx[(j + 1) % n], vy[(j + 1) % n]
        crossing = (y1 > py) != (y2 > py)
        if np.any(crossing):
            with np.errstate(divide="ignore", invalid="ignore"):
                xcross = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crossing & (px < xcross)
        seg_len = float(np.hypot(x2 - x1, y2 - y1))
        if seg_len == 0.0:
            continue
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        within = (
            (px >= min(x1, x2) - 1e-9)
            & (px <= max(x1, x2) + 1e-9)
            & (py >= min(y1, y2) - 1e-9)
            & (py <= max(y1, y2) + 1e-9)
        )
        on_edge |= within & (np.abs(cross) <= 1e-9 * seg_len)
    return BinaryMask(inside | on_edge)


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection-over-union of two same-sized masks."""
    if (a.height, a.width) != (b.height, b.width):
        raise DimensionError(
            f"mask dimensions differ: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    inter = int(np.logical_and(a.pixels, b.pixels).sum())
    union = int(np.logical_or(a.pixels, b.pixels).sum())
    if union == 0:
        raise EmptyError("IoU of two empty masks")
    return inter / union


def nms(detections: Sequence["Detection"], iou_threshold: float) -> list["Detection"]:
    """Greedy class-aware non-maximum suppression.

    Detections are processed in descending confidence (ties broken by
    ascending insertion index); one is kept iff its mask IoU with every
    already-kept detection of the same category is <= ``iou_threshold``.
    """
    if not detections:
        return []
    image_ids = {d.image_id for d in detections}
    if len(image_ids) > 1:
        raise MixedImageError(f"detections span images {sorted(image_ids)}")
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    decoded: dict[int, BinaryMask] = {}

    def pixels(i: int) -> BinaryMask:
        if i not in decoded:
            decoded[i] = rle_decode(detections[i].mask)
        return decoded[i]

    kept: list[int] = []
    for i in order:
        cat = detections[i].category_id
        if all(
            mask_iou(pixels(i), pixels(k)) <= iou_threshold
            for k in kept
            if detections[k].category_id == cat
        ):
            kept.append(i)
    return [detections[i] for i in kept]


def nms_per_image(
    detections: Iterable["Detection"], iou_threshold: float
) -> list["Detection"]:
    """Apply :func:`nms` independently per image; output grouped by image id."""
    groups: dict[int, list] = {}
    for d in detections:
        groups.setdefault(d.image_id, []).append(d)
    out: list = []
    for image_id in sorted(groups):
        out.extend(nms(groups[image_id], iou_threshold))
    return out
