"""Command-line front end.

Exit codes: 0 success, 1 domain error, 2 usage error. All randomness flows
from ``--seed`` (or the seed in the config file); the ``SEGLOOP_RUN_DIR``
environment variable supplies the default run directory.
"""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path

from . import loop as loop_mod
from .data import load_coco, load_detections, save_coco, validate_dataset
from .errors import ConfigError, SegloopError
from .evaluate import compute_metrics, greedy_match
from .loop import (
    RunConfig,
    grid_search,
    loio_eval,
    parse_config_text,
    restore_run,
    resume_run,
    run_loop,
)
from .report import render_report
from .synth import OverlapMode, coffee_analog, generate_experiment

RUN_DIR_ENV = "SEGLOOP_RUN_DIR"

_MODE_ALIASES = {
    "unconnected": OverlapMode.UNCONNECTED,
    "loose": OverlapMode.LOOSELY_OVERLAPPING,
    "loosely_overlapping": OverlapMode.LOOSELY_OVERLAPPING,
    "heavy": OverlapMode.HEAVILY_CONNECTED,
    "heavily_connected": OverlapMode.HEAVILY_CONNECTED,
}


def _default_run_dir() -> str | None:
    return os.environ.get(RUN_DIR_ENV)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segloop",
        description="Iterative self-training annotation engine for instance segmentation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--threshold", type=float, help="confidence threshold for promotion")
        p.add_argument("--epochs", type=int, help="epochs per iteration")
        p.add_argument("--iterations", type=int, help="number of self-learning iterations")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--detector", choices=["builtin", "external"], help="detector kind")
        p.add_argument("--detector-cmd", dest="detector_cmd",
                       help="command line for an external detector")

    p = sub.add_parser("synth", help="generate a synthetic experiment dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--instances", type=int, default=8)
    p.add_argument("--bootstrap-images", type=int, default=2)
    p.add_argument("--bootstrap-annotations", type=int, default=3)
    p.add_argument("--training-images", type=int, default=40)
    p.add_argument("--test-scenes", default="unconnected,unconnected,unconnected",
                   help="comma list of unconnected|loose|heavy")
    p.add_argument("--distractors", type=int, default=0, help="distractors per scene")
    p.add_argument("--hue-delta", type=float, default=0.35,
                   help="distractor hue shift (small values stress drift)")

    p = sub.add_parser("run", help="run the self-learning loop")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=_default_run_dir())
    add_config_flags(p)

    p = sub.add_parser("grid", help="sweep thresholds/epochs/annotation counts")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=_default_run_dir())
    p.add_argument("--thresholds", default="", help="comma list, e.g. 0.25,0.5,0.75")
    p.add_argument("--epoch-values", dest="epoch_values", default="",
                   help="comma list of epochs per iteration")
    p.add_argument("--annotations", default="",
                   help="comma list of bootstrap annotation counts")
    add_config_flags(p)

    p = sub.add_parser("loio", help="leave-one-image-out evaluation")
    p.add_argument("--dataset", type=Path, required=True)
    p.add_argument("--out", type=Path, default=_default_run_dir())
    p.add_argument("--bootstrap-images", type=int, default=1)
    p.add_argument("--per-category", type=int, default=None,
                   help="bootstrap annotations kept per category")
    add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a detections file against ground truth")
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--iou", type=float, default=0.75)

    p = sub.add_parser("restore", help="restore a checkpoint, optionally resuming the loop")
    p.add_argument("--run", type=Path, default=_default_run_dir())
    p.add_argument("--iteration", type=int, required=True)
    p.add_argument("--resume", action="store_true",
                   help="re-run the remaining iterations after the checkpoint")

    p = sub.add_parser("report", help="render report.svg and summary.txt for a run")
    p.add_argument("--run", type=Path, default=_default_run_dir())

    p = sub.add_parser("validate", help="load a dataset file and check its invariants")
    p.add_argument("--dataset", type=Path, required=True)

    return parser


class _Usage(Exception):
    pass


def _build_config(args: argparse.Namespace) -> RunConfig:
    mapping: dict[str, str] = {}
    if args.config:
        mapping.update(parse_config_text(Path(args.config).read_text(encoding="utf-8")))
    known = {f.name for f in dataclasses.fields(RunConfig)}
    for item in args.set:
        if "=" not in item:
            raise _Usage(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in known:
            raise _Usage(f"--set references unknown config key {key!r}")
        mapping[key] = value.strip()
    flag_map = {
        "threshold": args.threshold,
        "epochs_per_iteration": args.epochs,
        "n_iterations": args.iterations,
        "seed": args.seed,
        "detector": args.detector,
        "detector_command": args.detector_cmd,
    }
    for key, value in flag_map.items():
        if value is not None:
            mapping[key] = str(value)
    return RunConfig.from_mapping(mapping)


def _require_out(value, flag: str) -> Path:
    if value is None:
        raise _Usage(f"{flag} is required (or set ${RUN_DIR_ENV})")
    return Path(value)


def _parse_list(text: str, cast):
    return [cast(v) for v in text.split(",") if v.strip() != ""]


def _cmd_synth(args) -> int:
    modes = []
    for name in args.test_scenes.split(","):
        name = name.strip().lower()
        if name not in _MODE_ALIASES:
            raise _Usage(f"unknown test scene mode {name!r}")
        modes.append(_MODE_ALIASES[name])
    spec = coffee_analog(
        seed=args.seed,
        size=args.size,
        instances_per_image=args.instances,
        bootstrap_images=args.bootstrap_images,
        bootstrap_annotations=args.bootstrap_annotations,
        training_images=args.training_images,
        test_modes=tuple(modes),
        distractors_per_scene=args.distractors,
        distractor_hue_delta=args.hue_delta,
    )
    dataset = generate_experiment(spec, args.out)
    dataset_path = Path(args.out) / "dataset.json"
    save_coco(dataset, dataset_path)
    counts = dataset.partition_counts()
    print(f"wrote {dataset_path}")
    print(
        f"images: bootstrap={counts[0]} training={counts[1]} testing={counts[2]} "
        f"annotations={len(dataset.annotations)}"
    )
    return 0


def _cmd_run(args) -> int:
    config = _build_config(args)
    dataset = load_coco(args.dataset)
    out = _require_out(args.out, "--out")
    records = run_loop(config, dataset, out)
    best = loop_mod.best_iteration(records)
    print(f"completed {len(records)} iterations in {out}")
    if best is not None:
        print(
            f"best iteration {best.iteration}: ap75={best.metrics.ap75:.4f} "
            f"ar75={best.metrics.ar75:.4f} detected={best.metrics.n_detected_instances}"
        )
    return 0


def _cmd_grid(args) -> int:
    config = _build_config(args)
    dataset = load_coco(args.dataset)
    out = _require_out(args.out, "--out")
    thresholds = _parse_list(args.thresholds, float) or [config.threshold]
    epochs = _parse_list(args.epoch_values, int) or [config.epochs_per_iteration]
    annotations = _parse_list(args.annotations, int) or None
    cells = grid_search(
        config, dataset, out, thresholds=thresholds, epochs=epochs, annotations=annotations
    )
    print(f"wrote {Path(out) / 'grid.csv'} ({len(cells)} cells)")
    return 0


def _cmd_loio(args) -> int:
    config = _build_config(args)
    dataset = load_coco(args.dataset)
    out = _require_out(args.out, "--out")
    summaries = loio_eval(
        config,
        dataset,
        out,
        bootstrap_images=args.bootstrap_images,
        annotations_per_category=args.per_category,
    )
    print(f"wrote {Path(out) / 'loio.csv'} ({len(summaries)} holdouts)")
    return 0


def _cmd_eval(args) -> int:
    from .errors import NoGroundTruthError

    gt = load_coco(args.gt)
    detections = load_detections(args.pred)
    if not gt.annotations:
        raise NoGroundTruthError(f"{args.gt} has no annotations to evaluate against")
    annotated_images = sorted({a.image_id for a in gt.annotations})
    gt_by_image = {i: [a for a in gt.annotations if a.image_id == i] for i in annotated_images}
    categories = sorted({a.category_id for a in gt.annotations})
    ap_values, ar_values = [], []
    for category in categories:
        match = greedy_match(
            {i: [a for a in anns if a.category_id == category] for i, anns in gt_by_image.items()},
            [d for d in detections if d.category_id == category and d.image_id in gt_by_image],
            args.iou,
        )
        ap, ar = compute_metrics(match)
        ap_values.append(ap)
        ar_values.append(ar)
    ap = sum(ap_values) / len(ap_values)
    ar = sum(ar_values) / len(ar_values)
    print(f"ap75={ap} ar75={ar}")
    print(f"n_detections={len(detections)} n_gt={sum(len(v) for v in gt_by_image.values())}")
    return 0


def _cmd_restore(args) -> int:
    run_dir = _require_out(args.run, "--run")
    if args.resume:
        records = resume_run(run_dir, args.iteration)
        print(f"resumed from iteration {args.iteration}; run now has {len(records)} records")
        return 0
    state = restore_run(run_dir, args.iteration)
    state.handle.close()
    print(
        f"restored iteration {args.iteration}: {len(state.dataset.annotations)} annotations, "
        f"detector digest {state.history[-1].state_digest[:12]}"
    )
    return 0


def _cmd_report(args) -> int:
    run_dir = _require_out(args.run, "--run")
    svg, summary = render_report(run_dir)
    print(f"wrote {svg}")
    print(f"wrote {summary}")
    return 0


def _cmd_validate(args) -> int:
    dataset = load_coco(args.dataset)
    validate_dataset(dataset)
    counts = dataset.partition_counts()
    print(
        f"ok: {len(dataset.images)} images, {len(dataset.annotations)} annotations, "
        f"{len(dataset.categories)} categories"
    )
    print(f"partitions: bootstrap={counts[0]} training={counts[1]} testing={counts[2]}")
    return 0


_DISPATCH = {
    "synth": _cmd_synth,
    "run": _cmd_run,
    "grid": _cmd_grid,
    "loio": _cmd_loio,
    "eval": _cmd_eval,
    "restore": _cmd_restore,
    "report": _cmd_report,
    "validate": _cmd_validate,
}


def run_command(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return _DISPATCH[args.command](args)
    except _Usage as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SegloopError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
