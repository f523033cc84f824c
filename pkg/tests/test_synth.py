import numpy as np
import pytest

from segloop.errors import PackingError
from segloop.masks import mask_iou, rle_decode
from segloop.synth import (
    GRAIN,
    GRAIN_APPEARANCE,
    OverlapMode,
    SceneSpec,
    coffee_analog,
    fruits_analog,
    generate_experiment,
    generate_fully_annotated,
    generate_scene,
)


def scene_spec(**overrides):
    base = dict(
        width=96,
        height=96,
        n_instances={GRAIN.id: 8},
        appearance={GRAIN.id: GRAIN_APPEARANCE},
        seed=7,
    )
    base.update(overrides)
    return SceneSpec(**base)


def chebyshev_gap(a, b):
    ra, ca = np.nonzero(a)
    rb, cb = np.nonzero(b)
    dr = np.abs(ra[:, None] - rb[None, :])
    dc = np.abs(ca[:, None] - cb[None, :])
    return int(np.maximum(dr, dc).min())


class TestGenerateScene:
    def test_empty_scene(self):
        image, instances = generate_scene(scene_spec(n_instances={GRAIN.id: 0}))
        assert instances == []
        assert image.shape == (96, 96, 3)

    def test_deterministic_per_seed(self):
        a_img, a_inst = generate_scene(scene_spec())
        b_img, b_inst = generate_scene(scene_spec())
        assert np.array_equal(a_img, b_img)
        assert a_inst == b_inst
        c_img, _ = generate_scene(scene_spec(seed=8))
        assert not np.array_equal(a_img, c_img)

    def test_unconnected_separation(self):
        _, instances = generate_scene(scene_spec(n_instances={GRAIN.id: 5}, seed=7))
        assert len(instances) == 5
        for i in range(5):
            for j in range(i + 1, 5):
                assert mask_iou(instances[i].mask, instances[j].mask) == 0.0
                gap = chebyshev_gap(instances[i].mask.pixels, instances[j].mask.pixels)
                assert gap >= 2

    def test_loosely_overlapping_has_touching_pair_capped(self):
        _, instances = generate_scene(
            scene_spec(overlap_mode=OverlapMode.LOOSELY_OVERLAPPING, seed=3)
        )
        masks = [inst.full_mask.pixels for inst in instances]
        pair_found = False
        for i in range(len(masks)):
            for j in range(i + 1, len(masks)):
                inter = (masks[i] & masks[j]).sum()
                union = (masks[i] | masks[j]).sum()
                iou = inter / union
                assert iou <= 0.3 + 1e-9
                touching = bool(
                    inter > 0 or chebyshev_gap(masks[i], masks[j]) <= 1
                )
                pair_found = pair_found or touching
        assert pair_found

    def test_heavily_connected_touch_fraction(self):
        _, instances = generate_scene(
            scene_spec(overlap_mode=OverlapMode.HEAVILY_CONNECTED, seed=5)
        )
        masks = [inst.full_mask.pixels for inst in instances]
        touching = 0
        for i in range(len(masks)):
            if any(
                chebyshev_gap(masks[i], masks[j]) <= 1
                for j in range(len(masks))
                if j != i
            ):
                touching += 1
        assert touching >= 0.5 * len(masks)

    def test_visible_masks_disjoint_after_occlusion(self):
        _, instances = generate_scene(
            scene_spec(overlap_mode=OverlapMode.HEAVILY_CONNECTED, seed=11)
        )
        union = np.zeros((96, 96), dtype=bool)
        for inst in instances:
            assert not (union & inst.mask.pixels).any()
            union |= inst.mask.pixels
            assert inst.mask.area >= 30  # min visible area

    def test_distractors_absent_from_ground_truth(self):
        clean_spec = scene_spec(seed=13)
        spiked_spec = scene_spec(seed=13, distractor_count=3)
        _, clean = generate_scene(clean_spec)
        image, spiked = generate_scene(spiked_spec)
        assert all(inst.category_id == GRAIN.id for inst in spiked)
        # distractor pixels show up in the image but not in any returned mask
        gt_union = np.zeros((96, 96), dtype=bool)
        for inst in spiked:
            gt_union |= inst.mask.pixels
        background = np.asarray(spiked_spec.background_color)
        off_background = np.abs(image - background).max(axis=2) > 0.15
        assert (off_background & ~gt_union).sum() > 30  # the distractors

    def test_packing_error_on_overfull_canvas(self):
        with pytest.raises(PackingError):
            generate_scene(
                SceneSpec(
                    width=64,
                    height=64,
                    n_instances={GRAIN.id: 100},
                    appearance={GRAIN.id: GRAIN_APPEARANCE},
                    seed=1,
                )
            )


class TestGenerateExperiment:
    def test_single_annotation_bootstrap(self, tmp_path):
        spec = coffee_analog(
            seed=1, bootstrap_images=1, bootstrap_annotations=1, training_images=2,
            test_modes=(OverlapMode.UNCONNECTED,),
        )
        dataset = generate_experiment(spec, tmp_path)
        humans = [a for a in dataset.annotations if a.source.is_human]
        boot_ids = set(dataset.bootstrap_image_ids())
        assert len([a for a in humans if a.image_id in boot_ids]) == 1

    def test_coffee_partition_counts(self, tmp_path):
        spec = coffee_analog(seed=2, bootstrap_images=2, bootstrap_annotations=6,
                             training_images=50)
        dataset = generate_experiment(spec, tmp_path)
        assert dataset.partition_counts() == (2, 52, 3)

    def test_three_regime_test_scenes(self, tmp_path):
        spec = coffee_analog(
            seed=3,
            training_images=1,
            test_modes=(
                OverlapMode.UNCONNECTED,
                OverlapMode.LOOSELY_OVERLAPPING,
                OverlapMode.HEAVILY_CONNECTED,
            ),
        )
        dataset = generate_experiment(spec, tmp_path)
        testing = dataset.testing_image_ids()
        assert len(testing) == 3
        for image_id in testing:
            assert dataset.annotations_for(image_id)  # fully annotated

    def test_training_images_unlabeled(self, tmp_path):
        spec = coffee_analog(seed=4, training_images=3)
        dataset = generate_experiment(spec, tmp_path)
        boot = set(dataset.bootstrap_image_ids())
        for image_id in dataset.training_image_ids():
            if image_id not in boot:
                assert dataset.annotations_for(image_id) == ()

    def test_images_written_and_loadable(self, tmp_path):
        from PIL import Image

        spec = coffee_analog(seed=5, training_images=1)
        dataset = generate_experiment(spec, tmp_path)
        for record in dataset.images:
            path = tmp_path / record.file_path
            assert path.exists()
            with Image.open(path) as handle:
                assert handle.size == (record.width, record.height)

    def test_byte_identical_regeneration(self, tmp_path):
        spec = coffee_analog(seed=6, training_images=2)
        a = generate_experiment(spec, tmp_path / "a")
        b = generate_experiment(spec, tmp_path / "b")
        assert a.annotations == b.annotations
        for record in a.images:
            assert (tmp_path / "a" / record.file_path).read_bytes() == (
                tmp_path / "b" / record.file_path
            ).read_bytes()

    def test_annotations_satisfy_invariants(self, tmp_path):
        # dataset construction itself validates area/bbox/geometry; also check
        # bootstrap annotations are a subset of the scene instances
        spec = coffee_analog(seed=7, training_images=1, bootstrap_annotations=4)
        dataset = generate_experiment(spec, tmp_path)
        for ann in dataset.annotations:
            mask = rle_decode(ann.mask)
            assert mask.area == ann.area
            assert ann.confidence == 1.0 and ann.source.is_human


class TestFruitsAnalog:
    def test_fully_annotated_multiclass(self, tmp_path):
        exp, scene = fruits_analog(seed=1, n_images=3)
        dataset = generate_fully_annotated(exp.categories, scene, 3, tmp_path, seed=1)
        assert len(dataset.images) == 3
        categories = {a.category_id for a in dataset.annotations}
        assert categories == {1, 2, 3}
        for image in dataset.images:
            assert dataset.annotations_for(image.id)
