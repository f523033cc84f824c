"""Deterministic synthetic scene generator.

Scenes contain many similar blob-shaped instances (deformed ellipses with
seeded radial perturbation) in one of three connectivity regimes, optionally
mixed with distractor objects that share the target shape statistics but a
hue-shifted appearance and never enter the ground truth. Instances draw in
z-order, so ground-truth masks are the visible (post-occlusion) regions.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import (
    AnnotatedDataset,
    Annotation,
    CategoryDef,
    ImageRecord,
    Partition,
    Source,
    annotation_from_mask,
)
from .errors import PackingError, StorageError
from .masks import BinaryMask
from .seeds import derive_seed

N_HARMONICS = 8
MAX_HARMONIC_AMPLITUDE = 0.3  # fraction of the base radius, summed over harmonics
UNCONNECTED_SEPARATION = 3  # Chebyshev pixels kept clear between instances
SCENE_RETRIES = 20
PLACEMENT_ATTEMPTS = 250
DISTRACTOR_TEXTURE_SIGMA = 0.06  # foil-like sheen: rougher than any target class


class OverlapMode(str, Enum):
    UNCONNECTED = "unconnected"
    LOOSELY_OVERLAPPING = "loosely_overlapping"
    HEAVILY_CONNECTED = "heavily_connected"


@dataclass(frozen=True)
class CategoryAppearance:
    """Appearance family of one category: instance base colors spread
    uniformly around ``color_mean`` with per-channel std ``color_sigma``;
    ``texture_sigma`` jitters pixels within an instance."""

    color_mean: tuple[float, float, float]
    color_sigma: float = 0.10
    texture_sigma: float = 0.02


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    n_instances: Mapping[int, int]
    appearance: Mapping[int, CategoryAppearance]
    overlap_mode: OverlapMode = OverlapMode.UNCONNECTED
    distractor_count: int = 0
    distractor_hue_delta: float = 0.35
    background_color: tuple[float, float, float] = (0.84, 0.83, 0.80)
    noise_sigma: float = 0.01
    radius_range: tuple[float, float] = (5.0, 8.5)
    min_visible_area: int = 30
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "n_instances", dict(self.n_instances))
        object.__setattr__(self, "appearance", dict(self.appearance))
        if self.width < 8 or self.height < 8:
            raise ValueError("canvas must be at least 8x8")
        if any(n < 0 for n in self.n_instances.values()):
            raise ValueError("instance counts must be >= 0")
        missing = set(self.n_instances) - set(self.appearance)
        if missing:
            raise ValueError(f"no appearance declared for categories {sorted(missing)}")
        if self.distractor_count < 0:
            raise ValueError("distractor_count must be >= 0")
        if self.distractor_count and not self.appearance:
            raise ValueError("distractors need at least one category to resemble")


@dataclass(frozen=True)
class SceneInstance:
    """One generated target instance. ``mask`` is the visible region that
    enters the ground truth; ``full_mask`` is the pre-occlusion shape."""

    category_id: int
    mask: BinaryMask
    full_mask: BinaryMask


def _hue_shift(color: tuple[float, float, float], delta: float) -> tuple[float, float, float]:
    h, s, v = colorsys.rgb_to_hsv(*color)
    return colorsys.hsv_to_rgb((h + delta) % 1.0, s, v)


def _blob_mask(
    height: int, width: int, cx: float, cy: float, radius: float, rng: np.random.Generator
) -> np.ndarray:
    """Deformed-ellipse blob: radius perturbed by 8 seeded harmonics with
    total amplitude <= 0.3 * radius."""
    amplitudes = rng.uniform(-1.0, 1.0, N_HARMONICS) * (MAX_HARMONIC_AMPLITUDE * radius / N_HARMONICS)
    phases = rng.uniform(0.0, 2.0 * np.pi, N_HARMONICS)
    stretch = rng.uniform(0.75, 1.3)
    ys, xs = np.mgrid[0:height, 0:width]
    dx = (xs + 0.5 - cx) * stretch
    dy = ys + 0.5 - cy
    dist = np.hypot(dx, dy)
    theta = np.arctan2(dy, dx)
    boundary = radius + sum(
        a * np.cos((k + 1) * theta + p) for k, (a, p) in enumerate(zip(amplitudes, phases))
    )
    return dist <= boundary


def _dilate(mask: np.ndarray, k: int) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((2 * k + 1, 2 * k + 1), dtype=bool))


def _touching(a: np.ndarray, b: np.ndarray) -> bool:
    return bool((_dilate(a, 1) & b).any())


def _pair_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int((a | b).sum())
    return int((a & b).sum()) / union if union else 0.0


@dataclass
class _Placed:
    category_id: int
    mask: np.ndarray
    base_color: tuple[float, float, float]
    texture_sigma: float
    is_distractor: bool


def _sample_center(
    spec: SceneSpec, radius: float, rng: np.random.Generator
) -> tuple[float, float] | None:
    margin = radius * (1.0 + MAX_HARMONIC_AMPLITUDE) + 1.5
    if 2 * margin >= spec.width or 2 * margin >= spec.height:
        return None
    return (
        float(rng.uniform(margin, spec.width - margin)),
        float(rng.uniform(margin, spec.height - margin)),
    )


def _place_instances(spec: SceneSpec, rng: np.random.Generator) -> list[_Placed]:
    """Place all target instances, then distractors, honoring the overlap
    regime. Raises PackingError when the canvas cannot take the request."""
    mode = spec.overlap_mode
    placed: list[_Placed] = []
    blocked = np.zeros((spec.height, spec.width), dtype=bool)  # unconnected keep-out zone

    wanted: list[tuple[int, bool]] = []
    for category_id in sorted(spec.n_instances):
        wanted.extend((category_id, False) for _ in range(spec.n_instances[category_id]))
    resembled = min(spec.appearance) if spec.appearance else None
    wanted.extend((resembled, True) for _ in range(spec.distractor_count))

    for index, (category_id, is_distractor) in enumerate(wanted):
        appearance = spec.appearance[category_id]
        accepted = None
        for _ in range(PLACEMENT_ATTEMPTS):
            radius = float(rng.uniform(*spec.radius_range))
            anchored = (
                mode is OverlapMode.HEAVILY_CONNECTED
                and not is_distractor
                and placed
                and rng.uniform() < 0.85
            ) or (
                mode is OverlapMode.LOOSELY_OVERLAPPING
                and not is_distractor
                and index == 1
            )
            if anchored:
                targets = [p for p in placed if not p.is_distractor]
                anchor = targets[int(rng.integers(0, len(targets)))]
                ys, xs = np.nonzero(anchor.mask)
                acx, acy = float(xs.mean()), float(ys.mean())
                anchor_r = float(np.sqrt(anchor.mask.sum() / np.pi))
                if mode is OverlapMode.HEAVILY_CONNECTED:
                    gap = rng.uniform(0.55, 0.95)
                else:
                    gap = rng.uniform(0.75, 1.0)
                angle = rng.uniform(0.0, 2.0 * np.pi)
                d = (anchor_r + radius) * gap
                cx, cy = acx + d * np.cos(angle), acy + d * np.sin(angle)
                margin = radius * (1.0 + MAX_HARMONIC_AMPLITUDE) + 1.5
                if not (margin <= cx <= spec.width - margin and margin <= cy <= spec.height - margin):
                    continue
            else:
                center = _sample_center(spec, radius, rng)
                if center is None:
                    raise PackingError(
                        f"radius {radius:.1f} does not fit a {spec.width}x{spec.height} canvas"
                    )
                cx, cy = center
            mask = _blob_mask(spec.height, spec.width, cx, cy, radius, rng)
            if mask.sum() < spec.min_visible_area:
                continue
            if mode is OverlapMode.UNCONNECTED:
                if (mask & blocked).any():
                    continue
            else:
                ious = [_pair_iou(mask, p.mask) for p in placed]
                cap = 0.45 if mode is OverlapMode.HEAVILY_CONNECTED else 0.3
                if any(v > cap for v in ious):
                    continue
                if mode is OverlapMode.LOOSELY_OVERLAPPING and index == 1 and not is_distractor:
                    target = placed[0].mask
                    if not (_pair_iou(mask, target) > 0.0 or _touching(mask, target)):
                        continue
            accepted = mask
            break
        if accepted is None:
            raise PackingError(
                f"could not place instance {index + 1}/{len(wanted)} "
                f"after {PLACEMENT_ATTEMPTS} attempts"
            )
        if is_distractor:
            base = _hue_shift(appearance.color_mean, spec.distractor_hue_delta)
            jitter = rng.uniform(-0.02, 0.02, 3)
            color = tuple(float(np.clip(c + j, 0.0, 1.0)) for c, j in zip(base, jitter))
            texture = DISTRACTOR_TEXTURE_SIGMA
        else:
            half_width = np.sqrt(3.0) * appearance.color_sigma
            jitter = rng.uniform(-half_width, half_width, 3)
            color = tuple(
                float(np.clip(c + j, 0.0, 1.0))
                for c, j in zip(appearance.color_mean, jitter)
            )
            texture = appearance.texture_sigma
        placed.append(_Placed(category_id, accepted, color, texture, is_distractor))
        if mode is OverlapMode.UNCONNECTED:
            blocked |= _dilate(accepted, UNCONNECTED_SEPARATION)
    return placed


def _scene_satisfies_mode(spec: SceneSpec, instances: list[SceneInstance]) -> bool:
    masks = [inst.full_mask.pixels for inst in instances]
    if spec.overlap_mode is OverlapMode.LOOSELY_OVERLAPPING and len(masks) >= 2:
        return any(
            _touching(masks[i], masks[j]) or _pair_iou(masks[i], masks[j]) > 0
            for i in range(len(masks))
            for j in range(i + 1, len(masks))
        )
    if spec.overlap_mode is OverlapMode.HEAVILY_CONNECTED and len(masks) >= 2:
        touching = sum(
            any(_touching(masks[i], masks[j]) for j in range(len(masks)) if j != i)
            for i in range(len(masks))
        )
        return touching >= 0.5 * len(masks)
    return True


def generate_scene(spec: SceneSpec) -> tuple[np.ndarray, list[SceneInstance]]:
    """Render one scene. Returns the float RGB image in [0, 1] and the target
    instances (distractors appear in the image but never in the list).
    Deterministic per seed."""
    for attempt in range(SCENE_RETRIES):
        rng = np.random.default_rng([derive_seed("scene", spec.seed, attempt)])
        placed = _place_instances(spec, rng)

        image = np.ones((spec.height, spec.width, 3)) * np.asarray(spec.background_color)
        for p in placed:
            n = int(p.mask.sum())
            pixels = np.asarray(p.base_color) + rng.normal(0.0, p.texture_sigma, (n, 3))
            image[p.mask] = pixels
        if spec.noise_sigma > 0:
            image += rng.normal(0.0, spec.noise_sigma, image.shape)
        image = np.clip(image, 0.0, 1.0)

        instances: list[SceneInstance] = []
        occluders = np.zeros((spec.height, spec.width), dtype=bool)
        for p in reversed(placed):  # later-drawn instances occlude earlier ones
            visible = p.mask & ~occluders
            occluders |= p.mask
            if p.is_distractor:
                continue
            if int(visible.sum()) < spec.min_visible_area:
                continue  # occluded away: dropped from ground truth
            instances.append(
                SceneInstance(p.category_id, BinaryMask(visible), BinaryMask(p.mask))
            )
        instances.reverse()
        if _scene_satisfies_mode(spec, instances):
            return image, instances
    raise PackingError(
        f"no valid {spec.overlap_mode.value} arrangement after {SCENE_RETRIES} attempts"
    )


# -- whole experiments --------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    """Dataset shape: a few bootstrap images carrying a handful of human
    annotations, a larger unlabeled training set, and fully annotated test
    scenes, all sharing appearance."""

    categories: tuple[CategoryDef, ...]
    scene: SceneSpec
    bootstrap_images: int
    bootstrap_annotations: int
    training_images: int
    testing: tuple[SceneSpec, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "testing", tuple(self.testing))
        if self.bootstrap_images < 1 or self.bootstrap_annotations < 1:
            raise ValueError("need at least one bootstrap image and annotation")
        if self.training_images < 0:
            raise ValueError("training_images must be >= 0")


def _write_png(image: np.ndarray, path: Path) -> None:
    data = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data, mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise StorageError(f"cannot write {path}: {exc}") from exc


def generate_experiment(spec: ExperimentSpec, out_dir: str | Path) -> AnnotatedDataset:
    """Write scene images under ``out_dir/images`` and return the partitioned
    dataset: bootstrap images carry exactly the requested number of human
    annotations (seeded random choice of instances), training images carry
    none, testing images carry full ground truth."""
    out_dir = Path(out_dir)
    n_boot, n_train, n_test = spec.bootstrap_images, spec.training_images, len(spec.testing)
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    partition_of: dict[int, Partition] = {}

    # spread the annotation budget across bootstrap images, front-loaded
    base, extra = divmod(spec.bootstrap_annotations, n_boot)
    budget = [base + (1 if i < extra else 0) for i in range(n_boot)]

    next_ann = 1
    for index in range(n_boot + n_train + n_test):
        image_id = index + 1
        if index < n_boot:
            partition, scene = Partition.BOOTSTRAPPING, spec.scene
        elif index < n_boot + n_train:
            partition, scene = Partition.TRAINING, spec.scene
        else:
            partition, scene = Partition.TESTING, spec.testing[index - n_boot - n_train]
        scene = replace(scene, seed=derive_seed("image", spec.seed, image_id))
        image, instances = generate_scene(scene)
        file_path = f"images/img_{image_id:04d}.png"
        _write_png(image, out_dir / file_path)
        images.append(ImageRecord(image_id, scene.width, scene.height, file_path))
        partition_of[image_id] = partition

        keep: list[SceneInstance]
        if partition is Partition.BOOTSTRAPPING:
            want = budget[index]
            if want > len(instances):
                raise PackingError(
                    f"bootstrap image {image_id} has {len(instances)} instances, "
                    f"cannot annotate {want}"
                )
            rng = np.random.default_rng([derive_seed("pick", spec.seed, image_id)])
            chosen = sorted(rng.choice(len(instances), size=want, replace=False).tolist())
            keep = [instances[i] for i in chosen]
        elif partition is Partition.TESTING:
            keep = list(instances)
        else:
            keep = []
        for inst in keep:
            annotations.append(
                annotation_from_mask(
                    next_ann, image_id, inst.category_id, inst.mask, Source.human(), 1.0
                )
            )
            next_ann += 1

    return AnnotatedDataset(
        categories=spec.categories,
        images=tuple(images),
        annotations=tuple(annotations),
        partition_of=partition_of,
        images_root=out_dir,
    )


# -- canonical fixtures --------------------------------------------------------

GRAIN = CategoryDef(1, "grain")
GRAIN_APPEARANCE = CategoryAppearance(color_mean=(0.50, 0.30, 0.14), color_sigma=0.10)


def coffee_analog(
    *,
    seed: int = 0,
    size: int = 96,
    instances_per_image: int = 8,
    bootstrap_images: int = 2,
    bootstrap_annotations: int = 3,
    training_images: int = 40,
    test_modes: Sequence[OverlapMode] = (OverlapMode.UNCONNECTED,) * 3,
    distractors_per_scene: int = 0,
    distractor_hue_delta: float = 0.35,
) -> ExperimentSpec:
    """Desk-scale analog of the single-class many-particles dataset shape."""
    scene = SceneSpec(
        width=size,
        height=size,
        n_instances={GRAIN.id: instances_per_image},
        appearance={GRAIN.id: GRAIN_APPEARANCE},
        overlap_mode=OverlapMode.UNCONNECTED,
        distractor_count=distractors_per_scene,
        distractor_hue_delta=distractor_hue_delta,
    )
    testing = tuple(replace(scene, overlap_mode=mode) for mode in test_modes)
    return ExperimentSpec(
        categories=(GRAIN,),
        scene=scene,
        bootstrap_images=bootstrap_images,
        bootstrap_annotations=bootstrap_annotations,
        training_images=training_images,
        testing=testing,
        seed=seed,
    )


FRUIT_CATEGORIES = (
    CategoryDef(1, "date"),
    CategoryDef(2, "fig"),
    CategoryDef(3, "hazelnut"),
)
FRUIT_APPEARANCE = {
    1: CategoryAppearance(color_mean=(0.55, 0.35, 0.18), color_sigma=0.06),
    2: CategoryAppearance(color_mean=(0.35, 0.25, 0.40), color_sigma=0.06),
    3: CategoryAppearance(color_mean=(0.62, 0.48, 0.30), color_sigma=0.06),
}


def fruits_analog(
    *,
    seed: int = 0,
    size: int = 96,
    n_images: int = 6,
    instances_per_class: int = 3,
    distractors_per_scene: int = 2,
    distractor_hue_delta: float = 0.35,
) -> tuple[ExperimentSpec, SceneSpec]:
    """Multi-class analog with gold-foil-style distractors; every image fully
    annotated (leave-one-image-out material)."""
    scene = SceneSpec(
        width=size,
        height=size,
        n_instances={c.id: instances_per_class for c in FRUIT_CATEGORIES},
        appearance=FRUIT_APPEARANCE,
        overlap_mode=OverlapMode.UNCONNECTED,
        distractor_count=distractors_per_scene,
        distractor_hue_delta=distractor_hue_delta,
    )
    exp = ExperimentSpec(
        categories=FRUIT_CATEGORIES,
        scene=scene,
        bootstrap_images=1,
        bootstrap_annotations=1,
        training_images=max(0, n_images - 1),
        testing=(),
        seed=seed,
    )
    return exp, scene


def generate_fully_annotated(
    categories: tuple[CategoryDef, ...],
    scene: SceneSpec,
    n_images: int,
    out_dir: str | Path,
    seed: int = 0,
) -> AnnotatedDataset:
    """All images fully annotated with human ground truth, all in training."""
    out_dir = Path(out_dir)
    images: list[ImageRecord] = []
    annotations: list[Annotation] = []
    next_ann = 1
    for image_id in range(1, n_images + 1):
        sc = replace(scene, seed=derive_seed("image", seed, image_id))
        image, instances = generate_scene(sc)
        file_path = f"images/img_{image_id:04d}.png"
        _write_png(image, out_dir / file_path)
        images.append(ImageRecord(image_id, sc.width, sc.height, file_path))
        for inst in instances:
            annotations.append(
                annotation_from_mask(
                    next_ann, image_id, inst.category_id, inst.mask, Source.human(), 1.0
                )
            )
            next_ann += 1
    return AnnotatedDataset(
        categories=categories,
        images=tuple(images),
        annotations=tuple(annotations),
        partition_of={im.id: Partition.TRAINING for im in images},
        images_root=out_dir,
    )
