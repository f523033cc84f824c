"""segloop: iterative self-training annotation engine for instance segmentation.

Starting from a handful of human annotations, the loop alternately trains a
pluggable detector and promotes its confidence-filtered detections to ground
truth, producing fully annotated datasets and per-iteration quality metrics.
"""

from .data import (
    AnnotatedDataset,
    Annotation,
    CategoryDef,
    Detection,
    ImageRecord,
    Partition,
    PartitionSpec,
    Source,
    annotation_from_mask,
    load_coco,
    make_partitions,
    save_coco,
)
from .detector import DetectorHandle, DetectorStateBlob, TrainJob, open_detector
from .errors import SegloopError
from .evaluate import MetricsRecord, compute_metrics, evaluate_dataset, greedy_match
from .loop import (
    IterationRecord,
    RunConfig,
    filter_detections,
    grid_search,
    loio_eval,
    restore_run,
    resume_run,
    run_loop,
)
from .masks import (
    BinaryMask,
    RLEMask,
    mask_iou,
    nms,
    rasterize_polygon,
    rle_decode,
    rle_encode,
)
from .refdetect import RefDetectorParams, ReferenceDetector, extract_features
from .report import render_report
from .synth import (
    CategoryAppearance,
    ExperimentSpec,
    OverlapMode,
    SceneSpec,
    coffee_analog,
    generate_experiment,
    generate_scene,
)

__version__ = "0.1.0"

__all__ = [
    "AnnotatedDataset",
    "Annotation",
    "BinaryMask",
    "CategoryAppearance",
    "CategoryDef",
    "Detection",
    "DetectorHandle",
    "DetectorStateBlob",
    "ExperimentSpec",
    "ImageRecord",
    "IterationRecord",
    "MetricsRecord",
    "OverlapMode",
    "Partition",
    "PartitionSpec",
    "RLEMask",
    "RefDetectorParams",
    "ReferenceDetector",
    "RunConfig",
    "SceneSpec",
    "SegloopError",
    "Source",
    "TrainJob",
    "annotation_from_mask",
    "coffee_analog",
    "compute_metrics",
    "evaluate_dataset",
    "extract_features",
    "filter_detections",
    "generate_experiment",
    "generate_scene",
    "greedy_match",
    "grid_search",
    "load_coco",
    "loio_eval",
    "make_partitions",
    "mask_iou",
    "nms",
    "open_detector",
    "rasterize_polygon",
    "render_report",
    "restore_run",
    "resume_run",
    "rle_decode",
    "rle_encode",
    "run_loop",
    "save_coco",
]
