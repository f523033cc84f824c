"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``. The property criteria are
exact; the trend criteria run the full loop on seeded synthetic experiments
at desk scale (builtin detector only).
"""
import shutil
import time
from pathlib import Path

import numpy as np
import pytest

from segloop.cli import run_command
from segloop.data import Detection
from segloop.detector import TrainJob, open_detector
from segloop.evaluate import compute_metrics, greedy_match
from segloop.loop import RunConfig, filter_detections, resume_run, run_loop
from segloop.masks import BinaryMask, RLEMask, nms, rle_decode, rle_encode
from segloop.synth import OverlapMode, coffee_analog, fruits_analog, generate_experiment, generate_fully_annotated

from conftest import detection as make_detection
from conftest import random_mask, random_rect_mask
from oracles import oracle_evaluate, pixel_set


def report(name: str, passed: bool, detail: str) -> None:
    print(f"{'PASS' if passed else 'FAIL'} {name} — {detail}")
    assert passed, f"{name}: {detail}"


# ---------------------------------------------------------------- P1


def test_p1_evaluator_oracle_equivalence():
    rng = np.random.default_rng(2024)
    start = time.monotonic()
    worst = 0.0
    cases = 220
    for case in range(cases):
        categories = [1] if case % 3 else [1, 2]
        n_images = int(rng.integers(1, 3))
        gt_items, det_items = [], []
        ann_id = 1
        for image_id in range(1, n_images + 1):
            for _ in range(int(rng.integers(1, 7))):  # <= 6 GT
                mask = random_rect_mask(rng, 10, 10)
                gt_items.append(
                    (image_id, ann_id, int(rng.choice(categories)), pixel_set(mask.pixels))
                )
                ann_id += 1
            for _ in range(int(rng.integers(0, 9))):  # <= 8 detections
                if rng.random() < 0.6 and gt_items:
                    base = gt_items[int(rng.integers(0, len(gt_items)))]
                    pixels = base[3]
                else:
                    pixels = pixel_set(random_rect_mask(rng, 10, 10).pixels)
                det_items.append(
                    (image_id, int(rng.choice(categories)), pixels,
                     float(np.round(rng.random(), 3)))
                )
        expected = oracle_evaluate(gt_items, det_items, 0.75)

        # production path, per category with unweighted averaging
        from segloop.data import Source, annotation_from_mask

        def to_mask(pixels):
            grid = np.zeros((10, 10), dtype=bool)
            for r, c in pixels:
                grid[r, c] = True
            return BinaryMask(grid)

        annotations = [
            annotation_from_mask(ann, img, cat, to_mask(px), Source.human(), 1.0)
            for img, ann, cat, px in gt_items
        ]
        detections = [
            Detection(img, cat, rle_encode(to_mask(px)), conf)
            for img, cat, px, conf in det_items
        ]
        ap_values, ar_values = [], []
        for cat in sorted({g[2] for g in gt_items}):
            gt_by_image = {
                i: [a for a in annotations if a.image_id == i and a.category_id == cat]
                for i in range(1, n_images + 1)
            }
            dets = [d for d in detections if d.category_id == cat]
            ap, ar = compute_metrics(greedy_match(gt_by_image, dets, 0.75))
            ap_values.append(ap)
            ar_values.append(ar)
        got = (sum(ap_values) / len(ap_values), sum(ar_values) / len(ar_values))
        worst = max(worst, abs(got[0] - expected[0]), abs(got[1] - expected[1]))
        assert abs(got[0] - expected[0]) <= 1e-9, f"case {case}: AP {got[0]} vs {expected[0]}"
        assert abs(got[1] - expected[1]) <= 1e-9, f"case {case}: AR {got[1]} vs {expected[1]}"
    elapsed = time.monotonic() - start
    report(
        "P1",
        elapsed < 10.0,
        f"AP75/AR75 equal brute-force oracle over {cases} cases "
        f"(max dev {worst:.2e}, {elapsed:.1f}s)",
    )


# ---------------------------------------------------------------- P2


def test_p2_rle_roundtrip():
    rng = np.random.default_rng(7)
    for _ in range(1000):
        h = int(rng.integers(1, 65))
        w = int(rng.integers(1, 65))
        mask = random_mask(rng, h, w)
        assert rle_decode(rle_encode(mask)) == mask
    fixture = np.zeros((2, 2), dtype=bool)
    fixture[0, 0] = True
    assert rle_encode(BinaryMask(fixture)).counts == (0, 1, 3)
    assert rle_encode(BinaryMask.zeros(2, 2)).counts == (4,)
    assert rle_decode(RLEMask(2, 2, (0, 1, 3))) == BinaryMask(fixture)
    assert rle_decode(RLEMask(2, 2, (4,))) == BinaryMask.zeros(2, 2)
    report("P2", True, "1000 random masks round-trip exactly; [0,1,3] and [4] fixtures match")


# ---------------------------------------------------------------- P3


def test_p3_filter_and_nms_laws():
    rng = np.random.default_rng(31)
    start = time.monotonic()
    for _ in range(500):
        dets = []
        for i in range(int(rng.integers(1, 10))):
            mask = random_mask(rng, 12, 12, ensure_nonempty=True)
            dets.append(make_detection(1, int(rng.integers(1, 3)), mask, float(rng.random())))
        t1, t2 = sorted(rng.random(2))
        low = filter_detections(dets, t1)
        high = filter_detections(dets, t2)
        assert all(d in low for d in high)  # monotone: higher threshold is a subset
        assert filter_detections(low, t1) == low  # idempotent
        threshold = float(rng.uniform(0.2, 0.8))
        kept = nms(dets, threshold)
        assert all(d in dets for d in kept)  # subset of input
        assert nms(kept, threshold) == kept  # idempotent
    elapsed = time.monotonic() - start
    report("P3", elapsed < 5.0, f"filter/NMS laws hold on 500 random sets ({elapsed:.1f}s)")


# ---------------------------------------------------------------- P4


def test_p4_self_learning_improves_over_bootstrap(tmp_path_factory):
    root = tmp_path_factory.mktemp("p4")
    start = time.monotonic()
    results = []
    for seed in (0, 1, 2):
        spec = coffee_analog(
            seed=seed,
            bootstrap_images=2,
            bootstrap_annotations=3,
            training_images=40,
            test_modes=(OverlapMode.UNCONNECTED,) * 3,
        )
        dataset = generate_experiment(spec, root / f"data{seed}")
        config = RunConfig(threshold=0.25, epochs_per_iteration=4, n_iterations=10, seed=seed)
        records = run_loop(config, dataset, root / f"run{seed}")
        aps = [r.metrics.ap75 for r in records]
        results.append((seed, aps[0], max(aps)))
        assert max(aps) >= 0.80, f"seed {seed}: best AP75 {max(aps):.3f} < 0.80"
        assert max(aps) >= aps[0] + 0.10, (
            f"seed {seed}: best {max(aps):.3f} not 0.10 above iteration-0 {aps[0]:.3f}"
        )
    elapsed = time.monotonic() - start
    detail = "; ".join(f"seed {s}: {a0:.2f} -> {b:.2f}" for s, a0, b in results)
    report("P4", elapsed < 300.0, f"{detail} ({elapsed:.0f}s)")


# ---------------------------------------------------------------- P5


def test_p5_threshold_ordering_and_drift(tmp_path_factory):
    root = tmp_path_factory.mktemp("p5")
    start = time.monotonic()
    spec = coffee_analog(
        seed=0,
        bootstrap_images=2,
        bootstrap_annotations=3,
        training_images=40,
        test_modes=(OverlapMode.UNCONNECTED,) * 3,
        distractors_per_scene=4,
        distractor_hue_delta=0.18,
    )
    dataset = generate_experiment(spec, root / "data")
    counts = {}
    gt = None
    for tau in (0.25, 0.75):
        config = RunConfig(threshold=tau, epochs_per_iteration=4, n_iterations=10, seed=0)
        records = run_loop(config, dataset, root / f"run_{tau}")
        counts[tau] = [r.metrics.n_detected_instances for r in records]
        gt = records[0].metrics.n_gt
    final_low, final_high = counts[0.25][-1], counts[0.75][-1]
    assert final_low >= final_high, f"final counts {final_low} < {final_high}"
    assert any(c > gt for c in counts[0.25]), f"tau=0.25 never overshot gt={gt}: {counts[0.25]}"
    assert all(c <= 1.1 * gt for c in counts[0.75]), (
        f"tau=0.75 exceeded gt+10% ({gt}): {counts[0.75]}"
    )
    elapsed = time.monotonic() - start
    report(
        "P5",
        elapsed < 300.0,
        f"gt={gt}; final counts {final_low} >= {final_high}; "
        f"tau=0.25 peaks at {max(counts[0.25])}, tau=0.75 at {max(counts[0.75])} ({elapsed:.0f}s)",
    )


# ---------------------------------------------------------------- P6


def test_p6_checkpoint_restore_determinism(tmp_path_factory):
    root = tmp_path_factory.mktemp("p6")
    start = time.monotonic()
    spec = coffee_analog(
        seed=3, size=64, instances_per_image=5, bootstrap_images=2,
        bootstrap_annotations=3, training_images=6,
        test_modes=(OverlapMode.UNCONNECTED,),
    )
    dataset = generate_experiment(spec, root / "data")
    config = RunConfig(threshold=0.25, epochs_per_iteration=1, n_iterations=6, seed=3)
    run_loop(config, dataset, root / "full")
    shutil.copytree(root / "full", root / "split")
    resume_run(root / "split", 3)
    same_csv = (root / "full" / "metrics.csv").read_bytes() == (
        root / "split" / "metrics.csv"
    ).read_bytes()
    final = Path("iterations") / "006" / "annotations.json"
    same_annotations = (root / "full" / final).read_bytes() == (
        root / "split" / final
    ).read_bytes()
    elapsed = time.monotonic() - start
    report(
        "P6",
        same_csv and same_annotations and elapsed < 120.0,
        f"restore@3 of a 6-iteration run reproduces metrics.csv and final "
        f"annotations byte-identically ({elapsed:.0f}s)",
    )


# ---------------------------------------------------------------- P7


def test_p7_epoch_accounting(tmp_path_factory):
    root = tmp_path_factory.mktemp("p7")
    from segloop.synth import GRAIN, GRAIN_APPEARANCE, SceneSpec

    scene = SceneSpec(
        width=64, height=64, n_instances={GRAIN.id: 4},
        appearance={GRAIN.id: GRAIN_APPEARANCE},
    )
    dataset = generate_fully_annotated((GRAIN,), scene, 2, root, seed=5)
    items = tuple((im, dataset.annotations_for(im.id)) for im in dataset.images)
    handle = open_detector("builtin", seed=0, image_root=dataset.images_root)
    try:
        handle.train(TrainJob(items=items, epochs=1, batch_size=2, steps_per_epoch=24))
        first = handle.trained_steps
        handle.train(TrainJob(items=items, epochs=3, batch_size=2, steps_per_epoch=24))
        second = handle.trained_steps
    finally:
        handle.close()
    report(
        "P7",
        first == 48 and second == 48 + 144,
        f"one epoch with defaults presents exactly 2 x 24 = 48 images "
        f"(counters: {first}, then +{second - first} for 3 epochs)",
    )


# ---------------------------------------------------------------- P8


def test_p8_experiment_design_fidelity(tmp_path_factory, capsys):
    root = tmp_path_factory.mktemp("p8")
    start = time.monotonic()
    code = run_command(
        [
            "synth", "--out", str(root / "data"), "--seed", "11", "--size", "72",
            "--instances", "6", "--bootstrap-images", "2",
            "--bootstrap-annotations", "12", "--training-images", "4",
            "--test-scenes", "unconnected",
        ]
    )
    assert code == 0
    dataset_path = str(root / "data" / "dataset.json")
    fast = ["--iterations", "1", "--set", "steps_per_epoch=2", "--set", "batch_size=1"]

    sweeps = {
        "annotations": ["--annotations", "1,3,6,12", "--thresholds", "0.25",
                        "--epoch-values", "1"],
        "epochs": ["--epoch-values", "25,50,100", "--thresholds", "0.25"],
        "thresholds": ["--thresholds", "0.25,0.5,0.75", "--epoch-values", "1"],
    }
    expected_rows = {"annotations": 4, "epochs": 3, "thresholds": 3}
    for name, axis in sweeps.items():
        out_dir = root / f"grid-{name}"
        code = run_command(
            ["grid", "--dataset", dataset_path, "--out", str(out_dir), "--seed", "11"]
            + axis + fast
        )
        assert code == 0, f"grid {name} failed"
        lines = (out_dir / "grid.csv").read_text().splitlines()
        header = lines[0].split(",")
        assert "best_iteration" in header, f"grid {name}: no best-iteration column"
        assert len(lines) - 1 == expected_rows[name], f"grid {name}: rows {len(lines) - 1}"
        assert all(line.endswith("ok") for line in lines[1:]), f"grid {name}: failed cells"
        if name == "annotations":
            assert [line.split(",")[0] for line in lines[1:]] == ["1", "3", "6", "12"]
        if name == "epochs":
            assert [line.split(",")[2] for line in lines[1:]] == ["25", "50", "100"]
        if name == "thresholds":
            assert [line.split(",")[1] for line in lines[1:]] == ["0.25", "0.5", "0.75"]

    # leave-one-image-out: M independent holdouts
    exp, scene = fruits_analog(seed=12, size=64, instances_per_class=2,
                               distractors_per_scene=0)
    loio_dataset = generate_fully_annotated(
        exp.categories, scene, 3, root / "loio-data", seed=12
    )
    from segloop.data import save_coco

    save_coco(loio_dataset, root / "loio-data" / "dataset.json")
    code = run_command(
        [
            "loio", "--dataset", str(root / "loio-data" / "dataset.json"),
            "--out", str(root / "loio"), "--seed", "12", "--per-category", "1",
        ]
        + fast + ["--epochs", "1"]
    )
    assert code == 0
    loio_lines = (root / "loio" / "loio.csv").read_text().splitlines()
    assert len(loio_lines) - 1 == 3, "expected one row per holdout"
    holdout_dirs = sorted(p.name for p in (root / "loio").iterdir() if p.is_dir())
    assert holdout_dirs == ["holdout_001", "holdout_002", "holdout_003"]
    elapsed = time.monotonic() - start
    with capsys.disabled():
        report(
            "P8",
            True,
            f"grid rows match the annotation/epoch/threshold sweeps (4/3/3) and "
            f"loio ran 3 holdouts "
            f"({elapsed:.0f}s)",
        )


# ---------------------------------------------------------------- S1 (secondary)


def test_s1_adapter_protocol_conformance(tmp_path_factory):
    pytest.importorskip(
        "segloop_adapter", reason="secondary adapter package not installed"
    )
    import sys

    from segloop.conformance import run_conformance

    workdir = tmp_path_factory.mktemp("s1")
    summary = run_conformance(
        [sys.executable, "-m", "segloop_adapter", "--seed", "5"], workdir
    )
    report(
        "S1",
        summary["detections"] >= 0 and bool(summary["name"]),
        f"adapter '{summary['name']}' passed hello/train/infer/save/load/close "
        f"with save/load identity",
    )
