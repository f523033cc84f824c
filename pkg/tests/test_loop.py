import shutil

import pytest

from segloop.data import load_coco
from segloop.errors import (
    EmptyGridError,
    MissingCheckpointError,
    NoBootstrapError,
    PartitionError,
)
from segloop.loop import (
    RunConfig,
    best_iteration,
    bootstrap_phase,
    filter_detections,
    grid_search,
    iterate_once,
    loio_eval,
    restore_run,
    resume_run,
    run_loop,
    subsample_bootstrap_annotations,
)
from segloop.synth import (
    OverlapMode,
    coffee_analog,
    fruits_analog,
    generate_experiment,
    generate_fully_annotated,
)

from conftest import detection, rect_mask


def small_experiment(tmp_path, seed=0, **overrides):
    params = dict(
        seed=seed,
        size=64,
        instances_per_image=5,
        bootstrap_images=2,
        bootstrap_annotations=3,
        training_images=5,
        test_modes=(OverlapMode.UNCONNECTED,),
    )
    params.update(overrides)
    spec = coffee_analog(**params)
    return generate_experiment(spec, tmp_path / "data")


def small_config(**overrides):
    params = dict(threshold=0.25, epochs_per_iteration=1, n_iterations=2, seed=0)
    params.update(overrides)
    return RunConfig(**params)


class TestFilter:
    def test_keeps_at_or_above_threshold(self):
        mask = rect_mask(8, 8, 0, 0, 3, 3)
        dets = [detection(1, 1, mask, c) for c in (0.9, 0.5, 0.2)]
        kept = filter_detections(dets, 0.25)
        assert [d.confidence for d in kept] == [0.9, 0.5]

    def test_boundary_inclusive(self):
        mask = rect_mask(8, 8, 0, 0, 3, 3)
        dets = [detection(1, 1, mask, 0.25)]
        assert filter_detections(dets, 0.25) == dets

    def test_zero_threshold_identity(self):
        mask = rect_mask(8, 8, 0, 0, 3, 3)
        dets = [detection(1, 1, mask, c) for c in (0.7, 0.1)]
        assert filter_detections(dets, 0.0) == dets

    def test_laws_random(self, rng):
        mask = rect_mask(8, 8, 0, 0, 3, 3)
        for _ in range(50):
            dets = [detection(1, 1, mask, float(rng.random())) for _ in range(10)]
            t1, t2 = sorted(rng.random(2))
            low, high = filter_detections(dets, t1), filter_detections(dets, t2)
            assert set(d.confidence for d in high) <= set(d.confidence for d in low)
            assert filter_detections(low, t1) == low  # idempotent
            kept_counts = [len(filter_detections(dets, t)) for t in (0.25, 0.5, 0.75)]
            assert kept_counts == sorted(kept_counts, reverse=True)


class TestBootstrapPhase:
    def test_no_bootstrap_error(self, tmp_path):
        dataset = small_experiment(tmp_path)
        stripped = type(dataset)(
            categories=dataset.categories,
            images=dataset.images,
            annotations=tuple(
                a for a in dataset.annotations
                if a.image_id not in set(dataset.bootstrap_image_ids())
            ),
            partition_of=dataset.partition_of,
            images_root=dataset.images_root,
        )
        with pytest.raises(NoBootstrapError):
            bootstrap_phase(small_config(), stripped, tmp_path / "run")

    def test_record_zero_and_presentations(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(epochs_per_iteration=4)
        state = bootstrap_phase(config, dataset, tmp_path / "run")
        try:
            assert [r.iteration for r in state.history] == [0]
            assert state.handle.trained_steps == 4 * 24 * 2  # presentations
            assert state.history[0].metrics is not None  # testing partition present
            assert (tmp_path / "run" / "iterations" / "000" / "annotations.json").exists()
            assert (tmp_path / "run" / "iterations" / "000" / "detector.state").exists()
        finally:
            state.handle.close()

    def test_zero_iteration_run(self, tmp_path):
        dataset = small_experiment(tmp_path)
        records = run_loop(small_config(n_iterations=0), dataset, tmp_path / "run")
        assert len(records) == 1 and records[0].iteration == 0


class TestIterateOnce:
    def test_forced_empty_threshold_skips_training(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(threshold=1.0, n_iterations=0)
        state = bootstrap_phase(config, dataset, tmp_path / "run")
        try:
            digest_before = state.history[0].state_digest
            state = iterate_once(state)
            record = state.history[-1]
            assert record.promoted == 0
            assert record.training_skipped
            assert record.state_digest == digest_before  # weights untouched
        finally:
            state.handle.close()

    def test_promotions_replace_inferred_keep_human(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=0)
        state = bootstrap_phase(config, dataset, tmp_path / "run")
        try:
            originals = {a.id: a for a in dataset.annotations}
            state = iterate_once(state)
            first = [a for a in state.dataset.annotations if not a.source.is_human]
            assert all(a.source.iteration == 1 for a in first)
            state = iterate_once(state)
            second = [a for a in state.dataset.annotations if not a.source.is_human]
            assert all(a.source.iteration == 2 for a in second)  # fully replaced
            for ann in state.dataset.annotations:
                if ann.source.is_human:
                    assert ann == originals[ann.id]  # byte-identical
                else:
                    assert ann.confidence >= config.threshold
        finally:
            state.handle.close()

    def test_bootstrap_images_keep_human_precedence(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=0)
        state = bootstrap_phase(config, dataset, tmp_path / "run")
        try:
            from segloop.masks import mask_iou, rle_decode

            state = iterate_once(state)
            boot = set(state.dataset.bootstrap_image_ids())
            humans = [
                a for a in state.dataset.annotations
                if a.source.is_human and a.image_id in boot
            ]
            inferred = [
                a for a in state.dataset.annotations
                if not a.source.is_human and a.image_id in boot
            ]
            for h in humans:
                for i in inferred:
                    if i.image_id == h.image_id:
                        iou = mask_iou(rle_decode(i.mask), rle_decode(h.mask))
                        assert iou <= config.nms_iou
        finally:
            state.handle.close()


class TestRunLoopDeterminism:
    def test_identical_runs_identical_csv(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=2)
        run_loop(config, dataset, tmp_path / "a")
        run_loop(config, dataset, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.csv").read_bytes() == (
            tmp_path / "b" / "metrics.csv"
        ).read_bytes()

    def test_record_count(self, tmp_path):
        dataset = small_experiment(tmp_path)
        records = run_loop(small_config(n_iterations=3), dataset, tmp_path / "run")
        assert [r.iteration for r in records] == [0, 1, 2, 3]


class TestRestore:
    def test_restore_missing_checkpoint(self, tmp_path):
        dataset = small_experiment(tmp_path)
        run_loop(small_config(n_iterations=1), dataset, tmp_path / "run")
        with pytest.raises(MissingCheckpointError):
            restore_run(tmp_path / "run", 9)

    def test_restore_zero_matches_bootstrap(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=1)
        records = run_loop(config, dataset, tmp_path / "run")
        state = restore_run(tmp_path / "run", 0)
        try:
            assert state.history[-1].state_digest == records[0].state_digest
            assert state.handle.checkpoint().digest == records[0].state_digest
            assert len(state.dataset.annotations) == len(dataset.annotations)
        finally:
            state.handle.close()

    def test_split_run_equals_uninterrupted(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=4)
        run_loop(config, dataset, tmp_path / "full")
        shutil.copytree(tmp_path / "full", tmp_path / "split")
        resume_run(tmp_path / "split", 2)
        assert (tmp_path / "full" / "metrics.csv").read_bytes() == (
            tmp_path / "split" / "metrics.csv"
        ).read_bytes()
        final = "iterations/004/annotations.json"
        assert (tmp_path / "full" / final).read_bytes() == (
            tmp_path / "split" / final
        ).read_bytes()
        state_file = "iterations/004/detector.state"
        assert (tmp_path / "full" / state_file).read_bytes() == (
            tmp_path / "split" / state_file
        ).read_bytes()


class TestGridSearch:
    def test_empty_grid_rejected(self, tmp_path):
        dataset = small_experiment(tmp_path)
        with pytest.raises(EmptyGridError):
            grid_search(small_config(), dataset, tmp_path / "grid", thresholds=[], epochs=[1])

    def test_threshold_sweep_rows(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=1)
        cells = grid_search(
            config, dataset, tmp_path / "grid",
            thresholds=[0.25, 0.5, 0.75], epochs=[1],
        )
        assert len(cells) == 3
        text = (tmp_path / "grid" / "grid.csv").read_text().splitlines()
        assert text[0] == "annotations,threshold,epochs,best_iteration,ap75,ar75,n_instances,status"
        assert len(text) == 4
        assert all(row.endswith("ok") for row in text[1:])

    def test_failed_cell_isolated(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=1)
        cells = grid_search(
            config, dataset, tmp_path / "grid",
            thresholds=[0.25], epochs=[1], annotations=[1, 999],
        )
        statuses = [c.status for c in cells]
        assert statuses.count("failed") == 1
        assert statuses.count("ok") == 1

    def test_subsample_bootstrap(self, tmp_path):
        dataset = small_experiment(tmp_path, bootstrap_annotations=3)
        reduced = subsample_bootstrap_annotations(dataset, 1, seed=5)
        boot = set(reduced.bootstrap_image_ids())
        humans = [a for a in reduced.annotations if a.image_id in boot and a.source.is_human]
        assert len(humans) == 1
        with pytest.raises(PartitionError):
            subsample_bootstrap_annotations(dataset, 99, seed=5)


class TestLoio:
    def test_two_holdouts(self, tmp_path):
        exp, scene = fruits_analog(seed=2, size=64, instances_per_class=2,
                                   distractors_per_scene=0)
        dataset = generate_fully_annotated(exp.categories, scene, 2, tmp_path / "data", seed=2)
        config = small_config(n_iterations=1)
        summaries = loio_eval(config, dataset, tmp_path / "loio")
        assert len(summaries) == 2
        assert {s.holdout_image_id for s in summaries} == {1, 2}
        assert (tmp_path / "loio" / "loio.csv").exists()
        for s in summaries:
            holdout_dir = tmp_path / "loio" / f"holdout_{s.holdout_image_id:03d}"
            assert (holdout_dir / "metrics.csv").exists()

    def test_requires_two_annotated_images(self, tmp_path):
        exp, scene = fruits_analog(seed=3, size=64, instances_per_class=2,
                                   distractors_per_scene=0)
        dataset = generate_fully_annotated(exp.categories, scene, 1, tmp_path / "data", seed=3)
        with pytest.raises(PartitionError):
            loio_eval(small_config(), dataset, tmp_path / "loio")

    def test_per_category_bootstrap_limit(self, tmp_path):
        exp, scene = fruits_analog(seed=4, size=64, instances_per_class=2,
                                   distractors_per_scene=0)
        dataset = generate_fully_annotated(exp.categories, scene, 3, tmp_path / "data", seed=4)
        config = small_config(n_iterations=0)
        loio_eval(config, dataset, tmp_path / "loio", annotations_per_category=1)
        # inspect one fold's checkpoint: bootstrap keeps one human annotation per class
        fold = load_coco(tmp_path / "loio" / "holdout_001" / "iterations" / "000" / "annotations.json")
        boot = set(fold.bootstrap_image_ids())
        humans = [a for a in fold.annotations if a.image_id in boot and a.source.is_human]
        by_cat = {}
        for a in humans:
            by_cat[a.category_id] = by_cat.get(a.category_id, 0) + 1
        assert all(v == 1 for v in by_cat.values())


class TestBestIteration:
    def test_argmax_with_tie_toward_earliest(self, tmp_path):
        dataset = small_experiment(tmp_path)
        records = run_loop(small_config(n_iterations=2), dataset, tmp_path / "run")
        best = best_iteration(records)
        aps = [r.metrics.ap75 for r in records]
        assert best.metrics.ap75 == max(aps)
        assert best.iteration == aps.index(max(aps))


class TestConfigVariants:
    def test_cold_restart_reinitializes_weights(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=2, cold_restart=True)
        records = run_loop(config, dataset, tmp_path / "run")
        assert len(records) == 3  # runs to completion

    def test_keep_bootstrap_off_replaces_humans(self, tmp_path):
        dataset = small_experiment(tmp_path)
        config = small_config(n_iterations=1, keep_bootstrap_annotations=False)
        state = bootstrap_phase(config, dataset, tmp_path / "run")
        try:
            state = iterate_once(state)
            boot = set(state.dataset.bootstrap_image_ids())
            testing = set(state.dataset.testing_image_ids())
            for ann in state.dataset.annotations:
                if ann.image_id in boot:
                    assert not ann.source.is_human  # humans were let go
                if ann.image_id in testing:
                    assert ann.source.is_human  # evaluation ground truth kept
        finally:
            state.handle.close()
