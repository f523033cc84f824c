"""Built-in statistical reference detector.

A deterministic, trainable pixel classifier: every pixel gets a 5-vector
feature (r, g, b, local 3x3 mean intensity, local 3x3 intensity std), each
category keeps a running diagonal Gaussian over those features, and one
background model absorbs all pixels of annotated images that lie outside the
annotation masks. Segmentation scores each pixel per category against the
background, thresholds, takes connected components, and emits one detection
per component with a confidence graded by how typical the component's pixels
are for the category.

The category-vs-background score is a tempered posterior
``s_c = p_c^(1/T) / (p_c^(1/T) + q^(1/T))`` where ``q`` is the background
Gaussian density plus a constant outlier floor. The floor keeps blobs that
match *no* trained appearance out of the foreground, and the temperature
spreads confidences over (0, 1) instead of saturating, which is what lets a
confidence threshold act as a meaningful filter.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import Detection
from .errors import (
    EmptyJobError,
    GeometryError,
    NotTrainedError,
    SerializationError,
    VersionError,
)
from .masks import BinaryMask, rle_decode, rle_encode

if TYPE_CHECKING:
    from .data import Annotation, ImageRecord
    from .detector import TrainJob

STATE_VERSION = 1
N_FEATURES = 5
VARIANCE_FLOOR = 1e-6
BACKGROUND_ID = 0

AUG_HFLIP = "hflip"
AUG_VFLIP = "vflip"
AUG_ROT90 = "rot90"
AUG_NOISE = "noise"
DEFAULT_AUGMENTATIONS = frozenset({AUG_HFLIP, AUG_VFLIP, AUG_ROT90, AUG_NOISE})
_AUG_BITS = {AUG_HFLIP: 1, AUG_VFLIP: 2, AUG_ROT90: 4, AUG_NOISE: 8}


@dataclass(frozen=True)
class RefDetectorParams:
    pixel_threshold: float = 0.5
    min_area: int = 30
    connectivity: int = 8
    augmentations: frozenset[str] = DEFAULT_AUGMENTATIONS
    noise_sigma: float = 0.02
    score_temperature: float = 4.0
    outlier_density: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 < self.pixel_threshold < 1.0:
            raise ValueError(f"pixel_threshold {self.pixel_threshold} outside (0, 1)")
        if self.min_area < 1:
            raise ValueError("min_area must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        unknown = set(self.augmentations) - set(_AUG_BITS)
        if unknown:
            raise ValueError(f"unknown augmentations {sorted(unknown)}")
        if self.noise_sigma < 0 or self.outlier_density <= 0 or self.score_temperature <= 0:
            raise ValueError("noise_sigma >= 0, outlier_density > 0, temperature > 0 required")
        object.__setattr__(self, "augmentations", frozenset(self.augmentations))


class RunningStats:
    """Count-weighted running mean/variance of feature vectors."""

    __slots__ = ("n", "mean", "var")

    def __init__(self, n: int = 0, mean=None, var=None) -> None:
        self.n = int(n)
        self.mean = np.zeros(N_FEATURES) if mean is None else np.asarray(mean, dtype=float)
        self.var = np.zeros(N_FEATURES) if var is None else np.asarray(var, dtype=float)

    @property
    def usable(self) -> bool:
        return self.n >= 2

    def update(self, samples: np.ndarray) -> None:
        """Merge a (m, 5) sample block: mu <- (n*mu + m*xbar)/(n+m), variance
        merged through second moments, floored at 1e-6 once n >= 2."""
        m = samples.shape[0]
        if m == 0:
            return
        batch_mean = samples.mean(axis=0)
        batch_sq = (samples * samples).mean(axis=0)
        total = self.n + m
        second = (self.n * (self.var + self.mean**2) + m * batch_sq) / total
        self.mean = (self.n * self.mean + m * batch_mean) / total
        self.var = second - self.mean**2
        self.n = total
        if self.n >= 2:
            self.var = np.maximum(self.var, VARIANCE_FLOOR)
        else:
            self.var = np.maximum(self.var, 0.0)

    def log_density(self, features: np.ndarray) -> np.ndarray:
        """Diagonal-Gaussian log density over an (..., 5) feature grid."""
        var = np.maximum(self.var, VARIANCE_FLOOR)
        z2 = ((features - self.mean) ** 2 / var).sum(axis=-1)
        norm = float(np.log(2.0 * np.pi * var).sum())
        return -0.5 * (z2 + norm)


def extract_features(image: np.ndarray) -> np.ndarray:
    """Per-pixel 5-vector features; borders use edge replication for the
    3x3 window. Accepts float arrays in [0, 1] or uint8."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(float) / 255.0
    else:
        img = img.astype(float)
    if img.ndim != 3 or img.shape[2] != 3 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected an (h, w, 3) image, got shape {img.shape}")
    intensity = img.mean(axis=2)
    m1 = ndimage.uniform_filter(intensity, size=3, mode="nearest")
    m2 = ndimage.uniform_filter(intensity * intensity, size=3, mode="nearest")
    std = np.sqrt(np.clip(m2 - m1 * m1, 0.0, None))
    return np.dstack([img, m1, std])


def load_image(root: Path | None, record: "ImageRecord") -> np.ndarray:
    """Read the image file behind a record as float RGB in [0, 1]."""
    path = Path(record.file_path)
    if not path.is_absolute() and root is not None:
        path = Path(root) / path
    with Image.open(path) as handle:
        rgb = np.asarray(handle.convert("RGB"), dtype=float) / 255.0
    if rgb.shape[:2] != (record.height, record.width):
        raise GeometryError(
            f"image {record.id}: file is {rgb.shape[0]}x{rgb.shape[1]}, "
            f"record says {record.height}x{record.width}"
        )
    return rgb


def _apply_augmentation(
    image: np.ndarray,
    masks: Sequence[np.ndarray],
    params: RefDetectorParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """One fresh draw from the augmentation stream; the same geometric
    transform applies to image and masks, pixel noise to the image only."""
    aug = params.augmentations
    img = image
    out = list(masks)
    if AUG_HFLIP in aug and rng.integers(0, 2):
        img = img[:, ::-1]
        out = [m[:, ::-1] for m in out]
    if AUG_VFLIP in aug and rng.integers(0, 2):
        img = img[::-1, :]
        out = [m[::-1, :] for m in out]
    if AUG_ROT90 in aug:
        k = int(rng.integers(0, 4))
        if k:
            img = np.rot90(img, k)
            out = [np.rot90(m, k) for m in out]
    if AUG_NOISE in aug and params.noise_sigma > 0:
        img = np.clip(img + rng.normal(0.0, params.noise_sigma, img.shape), 0.0, 1.0)
    return np.ascontiguousarray(img), [np.ascontiguousarray(m) for m in out]


class ReferenceDetector:
    """Trainable statistical detector; deterministic given (state, job, seeds)."""

    def __init__(
        self,
        params: RefDetectorParams | None = None,
        seed: int = 0,
        image_root: Path | None = None,
    ) -> None:
        self.params = params or RefDetectorParams()
        self.seed = int(seed)
        self.image_root = Path(image_root) if image_root is not None else None
        self.models: dict[int, RunningStats] = {}
        self.trained_steps = 0

    # -- training -------------------------------------------------------------

    def _model(self, key: int) -> RunningStats:
        if key not in self.models:
            self.models[key] = RunningStats()
        return self.models[key]

    def _present(
        self,
        image: np.ndarray,
        annotations: Sequence[tuple[int, np.ndarray]],
        rng: np.random.Generator,
    ) -> None:
        masks = [m for _, m in annotations]
        aug_img, aug_masks = _apply_augmentation(image, masks, self.params, rng)
        features = extract_features(aug_img)
        covered = np.zeros(aug_img.shape[:2], dtype=bool)
        for (category_id, _), mask in zip(annotations, aug_masks):
            self._model(category_id).update(features[mask])
            covered |= mask
        outside = ~covered
        if outside.any():
            self._model(BACKGROUND_ID).update(features[outside])
        self.trained_steps += 1

    def train(self, job: "TrainJob") -> None:
        """Run ``epochs`` epochs of ``steps_per_epoch`` batches of
        ``batch_size`` presentations sampled from the annotated pool with
        replacement, each under a fresh augmentation draw."""
        pool = []
        for record, annotations in job.items:
            if not annotations:
                continue
            image = load_image(self.image_root, record)
            masks = [(a.category_id, rle_decode(a.mask).pixels) for a in annotations]
            pool.append((image, masks))
        if not pool:
            raise EmptyJobError("training job has no annotated images")
        rng = np.random.default_rng([self.seed, job.seed & 0x7FFFFFFF])
        params = self.params
        if job.augmentations is not None:
            params = replace(self.params, augmentations=frozenset(job.augmentations))
        old_params, self.params = self.params, params
        try:
            for _ in range(job.epochs):
                for _ in range(job.steps_per_epoch):
                    picks = rng.integers(0, len(pool), size=job.batch_size)
                    for i in picks:
                        image, masks = pool[int(i)]
                        self._present(image, masks, rng)
        finally:
            self.params = old_params

    def fit_epoch(
        self,
        items: Sequence[tuple[np.ndarray, Sequence[tuple[int, np.ndarray]]]],
        rng: np.random.Generator,
        batch_size: int = 2,
        steps_per_epoch: int = 24,
    ) -> None:
        """One epoch over in-memory (image, [(category, mask), ...]) items."""
        if not items:
            raise EmptyJobError("epoch has no annotated images")
        for _ in range(steps_per_epoch):
            picks = rng.integers(0, len(items), size=batch_size)
            for i in picks:
                image, masks = items[int(i)]
                self._present(image, masks, rng)

    # -- inference -------------------------------------------------------------

    def category_scores(self, image: np.ndarray) -> tuple[list[int], np.ndarray]:
        """Per-pixel tempered posterior score per trained category.

        Returns (category ids, score stack of shape (n_cats, h, w)).
        """
        cats = sorted(c for c, m in self.models.items() if c != BACKGROUND_ID and m.usable)
        if not cats:
            raise NotTrainedError("no category model has enough observations")
        features = extract_features(image)
        background = self.models.get(BACKGROUND_ID)
        log_outlier = float(np.log(self.params.outlier_density))
        if background is not None and background.usable:
            log_q = np.logaddexp(background.log_density(features), log_outlier)
        else:
            log_q = np.full(image.shape[:2], log_outlier)
        stack = np.empty((len(cats), image.shape[0], image.shape[1]))
        temperature = self.params.score_temperature
        for idx, cat in enumerate(cats):
            margin = (self.models[cat].log_density(features) - log_q) / temperature
            stack[idx] = 1.0 / (1.0 + np.exp(-np.clip(margin, -500, 500)))
        return cats, stack

    def segment_image(self, image: np.ndarray, image_id: int) -> list[Detection]:
        """Detections for one image: threshold the per-pixel scores, label
        8-connected components, keep those of sufficient area. The component
        category is the majority pixel label; its confidence is the mean score
        of that category over the component."""
        cats, stack = self.category_scores(image)
        best = stack.max(axis=0)
        labels = stack.argmax(axis=0)
        foreground = best > self.params.pixel_threshold
        structure = np.ones((3, 3), dtype=bool) if self.params.connectivity == 8 else None
        components, count = ndimage.label(foreground, structure=structure)
        detections: list[Detection] = []
        for comp in range(1, count + 1):
            member = components == comp
            area = int(member.sum())
            if area < self.params.min_area:
                continue
            votes = np.bincount(labels[member], minlength=len(cats))
            winner = int(votes.argmax())
            confidence = float(stack[winner][member].mean())
            detections.append(
                Detection(
                    image_id=image_id,
                    category_id=cats[winner],
                    mask=rle_encode(BinaryMask(member)),
                    confidence=confidence,
                )
            )
        return detections

    def infer(self, images: Sequence["ImageRecord"]) -> list[Detection]:
        if self.trained_steps == 0:
            raise NotTrainedError("detector has not been trained")
        out: list[Detection] = []
        for record in images:
            out.extend(self.segment_image(load_image(self.image_root, record), record.id))
        return out

    # -- state ------------------------------------------------------------------

    def save_bytes(self) -> bytes:
        """Little-endian state layout: version byte, trained-step count, model
        count, then per model (id, n, mean[5], var[5]), then the params."""
        parts = [struct.pack("<BQI", STATE_VERSION, self.trained_steps, len(self.models))]
        for key in sorted(self.models):
            m = self.models[key]
            parts.append(struct.pack("<qq", key, m.n))
            parts.append(np.asarray(m.mean, dtype="<f8").tobytes())
            parts.append(np.asarray(m.var, dtype="<f8").tobytes())
        flags = sum(_AUG_BITS[a] for a in self.params.augmentations)
        parts.append(
            struct.pack(
                "<dqqdddQ",
                self.params.pixel_threshold,
                self.params.min_area,
                self.params.connectivity,
                self.params.noise_sigma,
                self.params.score_temperature,
                self.params.outlier_density,
                flags,
            )
        )
        return b"".join(parts)

    @classmethod
    def from_bytes(
        cls, data: bytes, seed: int = 0, image_root: Path | None = None
    ) -> "ReferenceDetector":
        try:
            version, steps, n_models = struct.unpack_from("<BQI", data, 0)
            if version != STATE_VERSION:
                raise VersionError(f"unsupported state version {version}")
            offset = struct.calcsize("<BQI")
            models: dict[int, RunningStats] = {}
            for _ in range(n_models):
                key, n = struct.unpack_from("<qq", data, offset)
                offset += 16
                mean = np.frombuffer(data, dtype="<f8", count=N_FEATURES, offset=offset).copy()
                offset += 8 * N_FEATURES
                var = np.frombuffer(data, dtype="<f8", count=N_FEATURES, offset=offset).copy()
                offset += 8 * N_FEATURES
                models[int(key)] = RunningStats(n, mean, var)
            (thr, min_area, conn, noise, temp, outlier, flags) = struct.unpack_from(
                "<dqqdddQ", data, offset
            )
            offset += struct.calcsize("<dqqdddQ")
            if offset != len(data):
                raise SerializationError("trailing bytes in detector state")
        except struct.error as exc:
            raise SerializationError(f"truncated detector state: {exc}") from exc
        params = RefDetectorParams(
            pixel_threshold=thr,
            min_area=int(min_area),
            connectivity=int(conn),
            augmentations=frozenset(a for a, bit in _AUG_BITS.items() if flags & bit),
            noise_sigma=noise,
            score_temperature=temp,
            outlier_density=outlier,
        )
        detector = cls(params=params, seed=seed, image_root=image_root)
        detector.models = models
        detector.trained_steps = int(steps)
        return detector
