"""AP75/AR75 evaluation of detections against ground-truth instances.

Matching is greedy and class-aware at a fixed mask-IoU level (0.75 by
default). Average precision uses the 101-point interpolated convention;
average recall is the matched fraction of ground truth after capping
detections per image. Multi-category datasets average per-category metrics
without weighting.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from .errors import EmptyTestSetError, NoGroundTruthError, UnknownImageError
from .masks import mask_iou, nms_per_image, rle_decode

if TYPE_CHECKING:
    from .data import Annotation, AnnotatedDataset, Detection
    from .loop import RunConfig

RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass(frozen=True)
class MatchResult:
    """Outcome of greedy matching: detections in rank order with TP flags."""

    ranked: tuple[int, ...]  # indices into the input detection list
    true_positive: tuple[bool, ...]
    matched_gt: Mapping[int, tuple[int, ...]]  # image id -> matched annotation ids
    n_gt: int
    n_det: int


@dataclass(frozen=True)
class CategoryMetrics:
    ap75: float
    ar75: float
    n_detected: int
    n_gt: int


@dataclass(frozen=True)
class MetricsRecord:
    iteration: int
    ap75: float
    ar75: float
    n_detected_instances: int
    n_gt: int
    per_category: Mapping[int, CategoryMetrics]


def greedy_match(
    gt_by_image: Mapping[int, Sequence["Annotation"]],
    detections: Sequence["Detection"],
    iou_threshold: float,
) -> MatchResult:
    """Match detections to ground truth in globally descending confidence.

    Ties break by ascending (image id, insertion index). Each detection takes
    the unmatched same-category ground-truth instance of its image with the
    highest IoU, provided that IoU >= ``iou_threshold``; otherwise it is a
    false positive. IoU ties break by ascending annotation id.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside (0, 1]")
    for d in detections:
        if d.image_id not in gt_by_image:
            raise UnknownImageError(f"detection references unknown image {d.image_id}")

    gt_masks = {
        img: [rle_decode(a.mask) for a in anns] for img, anns in gt_by_image.items()
    }
    ranked = sorted(
        range(len(detections)),
        key=lambda i: (-detections[i].confidence, detections[i].image_id, i),
    )
    taken: dict[int, set[int]] = {img: set() for img in gt_by_image}
    matched: dict[int, list[int]] = {img: [] for img in gt_by_image}
    flags: list[bool] = []
    for i in ranked:
        det = detections[i]
        det_mask = rle_decode(det.mask)
        anns = gt_by_image[det.image_id]
        best_j, best_iou = -1, 0.0
        for j, ann in enumerate(anns):
            if j in taken[det.image_id] or ann.category_id != det.category_id:
                continue
            iou = mask_iou(det_mask, gt_masks[det.image_id][j])
            if iou > best_iou or (iou == best_iou and best_j >= 0 and ann.id < anns[best_j].id):
                best_j, best_iou = j, iou
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[det.image_id].add(best_j)
            matched[det.image_id].append(anns[best_j].id)
            flags.append(True)
        else:
            flags.append(False)
    return MatchResult(
        ranked=tuple(ranked),
        true_positive=tuple(flags),
        matched_gt={img: tuple(ids) for img, ids in matched.items()},
        n_gt=sum(len(v) for v in gt_by_image.values()),
        n_det=len(detections),
    )


def compute_metrics(match: MatchResult) -> tuple[float, float]:
    """(AP, AR) from a match result.

    AP is the mean over the 101 recall points of the interpolated precision
    max{p(r') : r' >= r}, zero where unattained. AR is the matched fraction
    of ground truth.
    """
    if match.n_gt == 0:
        raise NoGroundTruthError("metrics undefined with zero ground-truth instances")
    if match.n_det == 0:
        return (0.0, 0.0)
    tp = np.asarray(match.true_positive, dtype=float)
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    precision = cum_tp / ranks
    recall = cum_tp / match.n_gt
    # interpolated precision: running max from the right
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    for r in RECALL_POINTS:
        attained = recall >= r
        ap += float(interp[attained].max()) if attained.any() else 0.0
    ap /= len(RECALL_POINTS)
    ar = float(cum_tp[-1]) / match.n_gt
    return (ap, ar)


def _truncate_per_image(
    detections: Sequence["Detection"], max_dets: int
) -> list["Detection"]:
    by_image: dict[int, list[tuple[int, "Detection"]]] = {}
    for i, d in enumerate(detections):
        by_image.setdefault(d.image_id, []).append((i, d))
    keep: list[int] = []
    for img in by_image:
        ordered = sorted(by_image[img], key=lambda pair: (-pair[1].confidence, pair[0]))
        keep.extend(i for i, _ in ordered[:max_dets])
    keep.sort()
    return [detections[i] for i in keep]


def evaluate_dataset(
    dataset: "AnnotatedDataset",
    detections: Sequence["Detection"],
    config: "RunConfig",
    iteration: int,
) -> MetricsRecord:
    """Evaluate detections on the testing partition.

    Pipeline per image: NMS at ``config.nms_iou``, truncation to
    ``config.max_dets_per_image``, then the confidence filter at
    ``config.threshold`` (the instance count reported per iteration tracks
    the deployed threshold), then greedy matching at ``config.eval_iou`` per
    category.
    Per-category metrics average unweighted into the overall AP/AR.
    """
    testing = set(dataset.testing_image_ids())
    if not testing:
        raise EmptyTestSetError("dataset has no testing images")
    known = {im.id for im in dataset.images}
    for d in detections:
        if d.image_id not in known:
            raise UnknownImageError(f"detection references unknown image {d.image_id}")

    gt = [a for a in dataset.annotations if a.image_id in testing]
    if not gt:
        raise NoGroundTruthError("testing partition has no annotations")

    dets = [d for d in detections if d.image_id in testing]
    dets = nms_per_image(dets, config.nms_iou)
    dets = _truncate_per_image(dets, config.max_dets_per_image)
    dets = [d for d in dets if d.confidence >= config.threshold]

    per_category: dict[int, CategoryMetrics] = {}
    gt_categories = sorted({a.category_id for a in gt})
    for cat in gt_categories:
        gt_cat_by_image = {
            img: [a for a in gt if a.image_id == img and a.category_id == cat]
            for img in sorted(testing)
        }
        dets_cat = [d for d in dets if d.category_id == cat]
        match = greedy_match(gt_cat_by_image, dets_cat, config.eval_iou)
        ap, ar = compute_metrics(match)
        per_category[cat] = CategoryMetrics(
            ap75=ap, ar75=ar, n_detected=len(dets_cat), n_gt=match.n_gt
        )
    ap_mean = sum(m.ap75 for m in per_category.values()) / len(per_category)
    ar_mean = sum(m.ar75 for m in per_category.values()) / len(per_category)
    return MetricsRecord(
        iteration=iteration,
        ap75=ap_mean,
        ar75=ar_mean,
        n_detected_instances=len(dets),
        n_gt=len(gt),
        per_category=per_category,
    )
