"""The iterative self-learning orchestrator.

One run: a bootstrap phase fine-tunes the detector on the few human
annotations, then each iteration runs inference over the training images,
keeps detections at or above the confidence threshold, promotes the survivors
to ground truth (human annotations always win on bootstrap images), retrains
with carried-over weights, evaluates on the test partition, and checkpoints
everything needed for an exact restore.

Run directory layout::

    run.toml              flat key=value config snapshot
    metrics.csv           iteration,ap75,ar75,n_detected,n_gt,promoted,wall_ms
    iterations/NNN/annotations.json
    iterations/NNN/detector.state
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, replace
from itertools import product
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import (
    AnnotatedDataset,
    Annotation,
    Detection,
    Partition,
    PartitionSpec,
    Source,
    annotation_from_mask,
    load_coco,
    make_partitions,
    save_coco,
)
from .detector import DetectorHandle, DetectorStateBlob, TrainJob, open_detector
from .errors import (
    ConfigError,
    EmptyGridError,
    MissingCheckpointError,
    NoBootstrapError,
    PartitionError,
    SegloopError,
)
from .evaluate import MetricsRecord, evaluate_dataset
from .masks import mask_iou, nms_per_image, rle_decode
from .refdetect import RefDetectorParams
from .seeds import derive_seed

METRICS_HEADER = "iteration,ap75,ar75,n_detected,n_gt,promoted,wall_ms"
GRID_HEADER = "annotations,threshold,epochs,best_iteration,ap75,ar75,n_instances,status"
LOIO_HEADER = "holdout_image_id,best_iteration,ap75,ar75,n_detected,n_gt"


@dataclass(frozen=True)
class RunConfig:
    """All loop hyperparameters. Everything downstream is a pure function of
    the config, the dataset, and the seed."""

    threshold: float = 0.25
    epochs_per_iteration: int = 4
    n_iterations: int = 10
    batch_size: int = 2
    steps_per_epoch: int = 24
    nms_iou: float = 0.5
    eval_iou: float = 0.75
    max_dets_per_image: int = 100
    seed: int = 0
    detector: str = "builtin"
    detector_command: str = ""
    keep_bootstrap_annotations: bool = True
    include_bootstrap_in_training: bool = True
    cold_restart: bool = False
    pretrained_state: str = ""
    pixel_threshold: float = 0.5
    min_area: int = 30

    def __post_init__(self) -> None:
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold {self.threshold} outside [0, 1]")
        if self.epochs_per_iteration < 1:
            raise ConfigError("epochs_per_iteration must be >= 1")
        if self.n_iterations < 0:
            raise ConfigError("n_iterations must be >= 0")
        if self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ConfigError("batch_size and steps_per_epoch must be >= 1")
        if not 0.0 < self.nms_iou <= 1.0 or not 0.0 < self.eval_iou <= 1.0:
            raise ConfigError("nms_iou and eval_iou must lie in (0, 1]")
        if self.max_dets_per_image < 1:
            raise ConfigError("max_dets_per_image must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.detector not in ("builtin", "external"):
            raise ConfigError(f"unknown detector kind {self.detector!r}")
        if self.detector == "external" and not self.detector_command:
            raise ConfigError("external detector needs detector_command")

    # -- flat text form (run.toml snapshot / config files) --------------------

    def to_text(self, extra: Mapping[str, str] | None = None) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        for key, value in (extra or {}).items():
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, str]) -> "RunConfig":
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _parse_value(fields[key].type, raw, key)
        return cls(**kwargs)


def _parse_value(type_name: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if type_name == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if type_name == "int":
            return int(raw)
        if type_name == "float":
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    """Parse the flat key=value format (comments start with '#')."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    promoted: int
    training_detections: int
    metrics: MetricsRecord | None
    state_digest: str
    wall_ms: int
    training_skipped: bool = False


@dataclass
class RunState:
    config: RunConfig
    dataset: AnnotatedDataset
    handle: DetectorHandle
    history: list[IterationRecord]
    run_dir: Path
    human_annotations: tuple[Annotation, ...]


def filter_detections(detections: Sequence[Detection], threshold: float) -> list[Detection]:
    """Keep exactly the detections with confidence >= threshold, preserving
    order. Idempotent; monotone in the threshold."""
    return [d for d in detections if d.confidence >= threshold]


def _detector_params(config: RunConfig) -> RefDetectorParams:
    return RefDetectorParams(pixel_threshold=config.pixel_threshold, min_area=config.min_area)


def _open_from_config(
    config: RunConfig,
    dataset: AnnotatedDataset,
    pretrained: DetectorStateBlob | None = None,
) -> DetectorHandle:
    if pretrained is None and config.pretrained_state:
        pretrained = DetectorStateBlob.load(config.pretrained_state)
    return open_detector(
        config.detector,
        pretrained=pretrained,
        seed=config.seed,
        command=config.detector_command or None,
        image_root=dataset.images_root,
        params=_detector_params(config),
    )


def _train_job(config: RunConfig, dataset: AnnotatedDataset, iteration: int) -> TrainJob | None:
    items = []
    for image in dataset.images:
        if dataset.partition(image.id) is Partition.TESTING:
            continue
        anns = dataset.annotations_for(image.id)
        if anns:
            items.append((image, anns))
    if not items:
        return None
    return TrainJob(
        items=tuple(items),
        epochs=config.epochs_per_iteration,
        batch_size=config.batch_size,
        steps_per_epoch=config.steps_per_epoch,
        seed=derive_seed("train", config.seed, iteration),
    )


def _evaluate(
    config: RunConfig, dataset: AnnotatedDataset, handle: DetectorHandle, iteration: int
) -> MetricsRecord | None:
    testing_ids = dataset.testing_image_ids()
    if not testing_ids:
        return None
    images = [dataset.image_by_id(i) for i in testing_ids]
    detections = handle.infer(images)
    return evaluate_dataset(dataset, detections, config, iteration)


def _metrics_row(record: IterationRecord) -> str:
    m = record.metrics
    if m is None:
        ap = ar = n_det = n_gt = ""
    else:
        ap, ar = f"{m.ap75:.6f}", f"{m.ar75:.6f}"
        n_det, n_gt = str(m.n_detected_instances), str(m.n_gt)
    # wall time is recorded in the IterationRecord only; the CSV cell stays
    # constant so restored reruns reproduce the file byte-for-byte
    return f"{record.iteration},{ap},{ar},{n_det},{n_gt},{record.promoted},0"


def _append_metrics(run_dir: Path, record: IterationRecord) -> None:
    path = run_dir / "metrics.csv"
    if not path.exists():
        path.write_text(METRICS_HEADER + "\n", encoding="utf-8")
    with path.open("a", encoding="utf-8") as stream:
        stream.write(_metrics_row(record) + "\n")


def _checkpoint(run_dir: Path, iteration: int, dataset: AnnotatedDataset, blob: DetectorStateBlob) -> None:
    directory = run_dir / "iterations" / f"{iteration:03d}"
    directory.mkdir(parents=True, exist_ok=True)
    save_coco(dataset, directory / "annotations.json")
    blob.save(directory / "detector.state")


def best_iteration(records: Sequence[IterationRecord]) -> IterationRecord | None:
    """Argmax-AP75 record (ties resolved toward the earliest iteration)."""
    scored = [r for r in records if r.metrics is not None]
    if not scored:
        return None
    return max(scored, key=lambda r: (r.metrics.ap75, -r.iteration))


def _write_summary(run_dir: Path, records: Sequence[IterationRecord]) -> None:
    # derived from metrics.csv so the standalone report command agrees exactly
    from .report import read_metrics, render_summary

    text = render_summary(read_metrics(run_dir / "metrics.csv"))
    (run_dir / "summary.txt").write_text(text, encoding="utf-8")


def bootstrap_phase(config: RunConfig, dataset: AnnotatedDataset, run_dir: str | Path) -> RunState:
    """Open the detector, fine-tune it on the bootstrap annotations only,
    evaluate, and write checkpoint 0."""
    run_dir = Path(run_dir)
    start = time.monotonic()
    bootstrap_ids = set(dataset.bootstrap_image_ids())
    human = [
        a
        for a in dataset.annotations
        if a.image_id in bootstrap_ids and a.source.is_human
    ]
    if not human:
        raise NoBootstrapError("bootstrapping partition has no human annotations")

    run_dir.mkdir(parents=True, exist_ok=True)
    extra = {}
    if dataset.images_root is not None:
        extra["images_root"] = str(Path(dataset.images_root).resolve())
    (run_dir / "run.toml").write_text(config.to_text(extra), encoding="utf-8")

    handle = _open_from_config(config, dataset)
    items = tuple(
        (dataset.image_by_id(i), tuple(a for a in human if a.image_id == i))
        for i in sorted(bootstrap_ids)
        if any(a.image_id == i for a in human)
    )
    handle.train(
        TrainJob(
            items=items,
            epochs=config.epochs_per_iteration,
            batch_size=config.batch_size,
            steps_per_epoch=config.steps_per_epoch,
            seed=derive_seed("train", config.seed, 0),
        )
    )
    metrics = _evaluate(config, dataset, handle, 0)
    blob = handle.checkpoint()
    record = IterationRecord(
        iteration=0,
        promoted=0,
        training_detections=0,
        metrics=metrics,
        state_digest=blob.digest,
        wall_ms=int((time.monotonic() - start) * 1000),
    )
    _checkpoint(run_dir, 0, dataset, blob)
    _append_metrics(run_dir, record)
    return RunState(
        config=config,
        dataset=dataset,
        handle=handle,
        history=[record],
        run_dir=run_dir,
        human_annotations=tuple(a for a in dataset.annotations if a.source.is_human),
    )


def iterate_once(state: RunState) -> RunState:
    """One self-learning round: infer, filter, promote, retrain, evaluate,
    checkpoint."""
    config = state.config
    dataset = state.dataset
    iteration = len(state.history)
    start = time.monotonic()

    training_ids = dataset.training_image_ids(config.include_bootstrap_in_training)
    images = [dataset.image_by_id(i) for i in training_ids]
    raw = state.handle.infer(images) if images else []
    suppressed = nms_per_image(raw, config.nms_iou)
    survivors = filter_detections(suppressed, config.threshold)

    # testing ground truth always persists; human labels on other partitions
    # persist unless keep_bootstrap_annotations is off
    testing_ids = set(dataset.testing_image_ids())
    kept_human = tuple(
        a
        for a in state.human_annotations
        if a.image_id in testing_ids or config.keep_bootstrap_annotations
    )
    if config.keep_bootstrap_annotations:
        bootstrap_ids = set(dataset.bootstrap_image_ids())
        bootstrap_humans = [a for a in kept_human if a.image_id in bootstrap_ids]
        human_masks = {a.id: rle_decode(a.mask) for a in bootstrap_humans}
        pruned = []
        for det in survivors:
            if det.image_id in bootstrap_ids:
                det_mask = rle_decode(det.mask)
                clash = any(
                    a.image_id == det.image_id
                    and mask_iou(det_mask, human_masks[a.id]) > config.nms_iou
                    for a in bootstrap_humans
                )
                if clash:
                    continue
            pruned.append(det)
        survivors = pruned

    next_id = max((a.id for a in kept_human), default=0) + 1
    promoted = []
    for det in survivors:
        promoted.append(
            annotation_from_mask(
                next_id,
                det.image_id,
                det.category_id,
                det.mask,
                source=Source.inferred(iteration),
                confidence=det.confidence,
            )
        )
        next_id += 1

    new_dataset = replace(dataset, annotations=tuple(kept_human) + tuple(promoted))

    skipped = len(promoted) == 0
    if not skipped:
        if config.cold_restart:
            state.handle.close()
            state.handle = _open_from_config(config, new_dataset)
        job = _train_job(config, new_dataset, iteration)
        if job is not None:
            state.handle.train(job)
        else:
            skipped = True

    metrics = _evaluate(config, new_dataset, state.handle, iteration)
    blob = state.handle.checkpoint()
    record = IterationRecord(
        iteration=iteration,
        promoted=len(promoted),
        training_detections=len(suppressed),
        metrics=metrics,
        state_digest=blob.digest,
        wall_ms=int((time.monotonic() - start) * 1000),
        training_skipped=skipped,
    )
    _checkpoint(state.run_dir, iteration, new_dataset, blob)
    _append_metrics(state.run_dir, record)
    state.dataset = new_dataset
    state.history.append(record)
    return state


def run_loop(
    config: RunConfig, dataset: AnnotatedDataset, run_dir: str | Path
) -> list[IterationRecord]:
    """Bootstrap then ``config.n_iterations`` self-learning rounds; writes
    metrics.csv and a summary naming the best (argmax-AP75) iteration."""
    state = bootstrap_phase(config, dataset, run_dir)
    try:
        for _ in range(config.n_iterations):
            state = iterate_once(state)
    finally:
        state.handle.close()
    _write_summary(state.run_dir, state.history)
    return state.history


# -- restore -------------------------------------------------------------------


def _read_run_config(run_dir: Path) -> tuple[RunConfig, Path | None]:
    path = run_dir / "run.toml"
    if not path.exists():
        raise MissingCheckpointError(f"{run_dir} has no run.toml")
    mapping = parse_config_text(path.read_text(encoding="utf-8"))
    images_root = mapping.pop("images_root", None)
    config = RunConfig.from_mapping(mapping)
    return config, Path(images_root) if images_root else None


def _read_history(run_dir: Path, upto: int) -> list[IterationRecord]:
    path = run_dir / "metrics.csv"
    if not path.exists():
        raise MissingCheckpointError(f"{run_dir} has no metrics.csv")
    records: list[IterationRecord] = []
    lines = path.read_text(encoding="utf-8").splitlines()
    for line in lines[1:]:
        cells = line.split(",")
        iteration = int(cells[0])
        if iteration > upto:
            continue
        metrics = None
        if cells[1]:
            metrics = MetricsRecord(
                iteration=iteration,
                ap75=float(cells[1]),
                ar75=float(cells[2]),
                n_detected_instances=int(cells[3]),
                n_gt=int(cells[4]),
                per_category={},
            )
        state_path = run_dir / "iterations" / f"{iteration:03d}" / "detector.state"
        digest = DetectorStateBlob.load(state_path).digest if state_path.exists() else ""
        records.append(
            IterationRecord(
                iteration=iteration,
                promoted=int(cells[5]),
                training_detections=0,
                metrics=metrics,
                state_digest=digest,
                wall_ms=int(cells[6]),
            )
        )
    return records


def restore_run(run_dir: str | Path, iteration: int) -> RunState:
    """Rebuild the live state exactly as it stood after ``iteration``."""
    run_dir = Path(run_dir)
    directory = run_dir / "iterations" / f"{iteration:03d}"
    if not directory.exists():
        raise MissingCheckpointError(f"no checkpoint for iteration {iteration} in {run_dir}")
    config, images_root = _read_run_config(run_dir)
    dataset = load_coco(directory / "annotations.json")
    if images_root is not None:
        dataset = replace(dataset, images_root=images_root)
    blob = DetectorStateBlob.load(directory / "detector.state")
    handle = _open_from_config(config, dataset, pretrained=blob)
    history = _read_history(run_dir, iteration)
    if len(history) != iteration + 1:
        raise MissingCheckpointError(
            f"metrics.csv covers {len(history)} iterations, expected {iteration + 1}"
        )
    human = tuple(a for a in dataset.annotations if a.source.is_human)
    return RunState(
        config=config,
        dataset=dataset,
        handle=handle,
        history=history,
        run_dir=run_dir,
        human_annotations=human,
    )


def resume_run(run_dir: str | Path, iteration: int) -> list[IterationRecord]:
    """Restore checkpoint ``iteration`` in place, drop any later history, and
    re-run the remaining iterations of the configured loop."""
    run_dir = Path(run_dir)
    state = restore_run(run_dir, iteration)

    metrics_path = run_dir / "metrics.csv"
    lines = metrics_path.read_text(encoding="utf-8").splitlines()
    keep = [lines[0]] + [l for l in lines[1:] if int(l.split(",", 1)[0]) <= iteration]
    metrics_path.write_text("\n".join(keep) + "\n", encoding="utf-8")
    iterations_dir = run_dir / "iterations"
    for entry in sorted(iterations_dir.iterdir()):
        if entry.is_dir() and int(entry.name) > iteration:
            for child in entry.iterdir():
                child.unlink()
            entry.rmdir()

    try:
        while len(state.history) <= state.config.n_iterations:
            state = iterate_once(state)
    finally:
        state.handle.close()
    _write_summary(run_dir, state.history)
    return state.history


# -- grid search -----------------------------------------------------------------


@dataclass(frozen=True)
class GridCell:
    annotations: int | None
    threshold: float
    epochs: int
    best_iteration: int | None
    ap75: float | None
    ar75: float | None
    n_instances: int | None
    status: str


def subsample_bootstrap_annotations(
    dataset: AnnotatedDataset, count: int, seed: int
) -> AnnotatedDataset:
    """Keep a seeded random subset of the bootstrap human annotations."""
    bootstrap_ids = set(dataset.bootstrap_image_ids())
    pool = sorted(
        (a for a in dataset.annotations if a.image_id in bootstrap_ids and a.source.is_human),
        key=lambda a: a.id,
    )
    if count > len(pool):
        raise PartitionError(f"asked for {count} bootstrap annotations, only {len(pool)} exist")
    rng = np.random.default_rng([derive_seed("subsample", seed, count)])
    chosen = {pool[i].id for i in rng.choice(len(pool), size=count, replace=False)}
    kept = tuple(
        a
        for a in dataset.annotations
        if a.id in chosen or a.image_id not in bootstrap_ids or not a.source.is_human
    )
    return replace(dataset, annotations=kept)


def grid_search(
    config: RunConfig,
    dataset: AnnotatedDataset,
    out_dir: str | Path,
    *,
    thresholds: Sequence[float],
    epochs: Sequence[int],
    annotations: Sequence[int] | None = None,
) -> list[GridCell]:
    """Run one loop per grid cell with independent derived seeds and emit
    grid.csv. A failing cell becomes a ``failed`` row without aborting the
    rest."""
    if not thresholds or not epochs or (annotations is not None and not annotations):
        raise EmptyGridError("grid axes must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ann_axis: Sequence[int | None] = list(annotations) if annotations is not None else [None]
    cells: list[GridCell] = []
    for index, (count, threshold, n_epochs) in enumerate(product(ann_axis, thresholds, epochs)):
        cell_dir = out_dir / f"cell_{index:03d}"
        try:
            cell_config = replace(
                config,
                threshold=threshold,
                epochs_per_iteration=n_epochs,
                seed=derive_seed("grid", config.seed, index),
            )
            cell_dataset = (
                subsample_bootstrap_annotations(dataset, count, cell_config.seed)
                if count is not None
                else dataset
            )
            records = run_loop(cell_config, cell_dataset, cell_dir)
            best = best_iteration(records)
            if best is None:
                cells.append(
                    GridCell(count, threshold, n_epochs, None, None, None, None, "no-metrics")
                )
            else:
                cells.append(
                    GridCell(
                        count,
                        threshold,
                        n_epochs,
                        best.iteration,
                        best.metrics.ap75,
                        best.metrics.ar75,
                        best.metrics.n_detected_instances,
                        "ok",
                    )
                )
        except (SegloopError, OSError):
            cells.append(GridCell(count, threshold, n_epochs, None, None, None, None, "failed"))
    rows = [GRID_HEADER]
    for c in cells:
        rows.append(
            ",".join(
                [
                    "" if c.annotations is None else str(c.annotations),
                    str(c.threshold),
                    str(c.epochs),
                    "" if c.best_iteration is None else str(c.best_iteration),
                    "" if c.ap75 is None else f"{c.ap75:.6f}",
                    "" if c.ar75 is None else f"{c.ar75:.6f}",
                    "" if c.n_instances is None else str(c.n_instances),
                    c.status,
                ]
            )
        )
    (out_dir / "grid.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return cells


# -- leave-one-image-out ----------------------------------------------------------


@dataclass(frozen=True)
class LoioSummary:
    holdout_image_id: int
    best_iteration: int | None
    ap75: float | None
    ar75: float | None
    n_detected: int | None
    n_gt: int | None


def loio_eval(
    config: RunConfig,
    dataset: AnnotatedDataset,
    out_dir: str | Path,
    *,
    bootstrap_images: int = 1,
    annotations_per_category: int | None = None,
) -> list[LoioSummary]:
    """Leave-one-image-out: every fully annotated image is held out once as
    the test set while the rest form training, with a seeded bootstrap subset
    of the remainder."""
    out_dir = Path(out_dir)
    annotated_ids = sorted({a.image_id for a in dataset.annotations})
    if len(annotated_ids) < 2:
        raise PartitionError("leave-one-image-out needs at least 2 annotated images")
    summaries: list[LoioSummary] = []
    for holdout in annotated_ids:
        remainder = [i for i in annotated_ids if i != holdout]
        rng = np.random.default_rng([derive_seed("loio-pick", config.seed, holdout)])
        picks = sorted(
            int(remainder[i])
            for i in rng.choice(len(remainder), size=min(bootstrap_images, len(remainder)), replace=False)
        )
        fold = make_partitions(
            dataset,
            PartitionSpec(
                bootstrapping=tuple(picks),
                training=tuple(remainder),
                testing=(holdout,),
            ),
        )
        if annotations_per_category is not None:
            fold = _limit_per_category(fold, annotations_per_category, config.seed, holdout)
        fold_config = replace(config, seed=derive_seed("loio-run", config.seed, holdout))
        records = run_loop(fold_config, fold, out_dir / f"holdout_{holdout:03d}")
        best = best_iteration(records)
        if best is None:
            summaries.append(LoioSummary(holdout, None, None, None, None, None))
        else:
            summaries.append(
                LoioSummary(
                    holdout,
                    best.iteration,
                    best.metrics.ap75,
                    best.metrics.ar75,
                    best.metrics.n_detected_instances,
                    best.metrics.n_gt,
                )
            )
    rows = [LOIO_HEADER]
    for s in summaries:
        rows.append(
            ",".join(
                [
                    str(s.holdout_image_id),
                    "" if s.best_iteration is None else str(s.best_iteration),
                    "" if s.ap75 is None else f"{s.ap75:.6f}",
                    "" if s.ar75 is None else f"{s.ar75:.6f}",
                    "" if s.n_detected is None else str(s.n_detected),
                    "" if s.n_gt is None else str(s.n_gt),
                ]
            )
        )
    (out_dir / "loio.csv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return summaries


def _limit_per_category(
    dataset: AnnotatedDataset, per_category: int, seed: int, tag: int
) -> AnnotatedDataset:
    bootstrap_ids = set(dataset.bootstrap_image_ids())
    humans = [
        a for a in dataset.annotations if a.image_id in bootstrap_ids and a.source.is_human
    ]
    keep_ids: set[int] = set()
    for category in sorted({a.category_id for a in humans}):
        candidates = sorted((a for a in humans if a.category_id == category), key=lambda a: a.id)
        rng = np.random.default_rng([derive_seed("loio-cat", seed, tag, category)])
        take = min(per_category, len(candidates))
        keep_ids.update(candidates[i].id for i in rng.choice(len(candidates), size=take, replace=False))
    kept = tuple(
        a
        for a in dataset.annotations
        if not (a.image_id in bootstrap_ids and a.source.is_human) or a.id in keep_ids
    )
    return replace(dataset, annotations=kept)
