import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rotdetr.config import preset
from rotdetr.errors import GenerationError
from rotdetr.geometry import pairwise_iou, to_polygon
from rotdetr.synth import (SceneConfig, box_coverage, class_color, generate_scene, hflip, load_scene_annotations,
                           make_dataset, save_scenes, scene_seeds)


def corners(box):
    return np.asarray(to_polygon(box).vertices)


def pixel_count(box, size, grid=8):
    """Independent raster oracle: sub-pixel samples inside all four edge half-planes."""
    cx, cy, w, h, a = box
    sub = (np.arange(size * grid) + 0.5) / (size * grid)
    gy, gx = np.meshgrid(sub, sub, indexing="ij")
    u = (gx - cx) * math.cos(a) + (gy - cy) * math.sin(a)
    v = -(gx - cx) * math.sin(a) + (gy - cy) * math.cos(a)
    inside = (np.abs(u) <= w / 2) & (np.abs(v) <= h / 2)
    return inside.sum() / grid**2


class TestGenerateScene:
    def test_same_seed_bit_identical(self):
        a, b = generate_scene(11), generate_scene(11)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.gts.boxes, b.gts.boxes)
        assert np.array_equal(a.gts.labels, b.gts.labels)

    def test_different_seeds_differ(self):
        assert not np.array_equal(generate_scene(1).image, generate_scene(2).image)

    def test_zero_objects(self):
        s = generate_scene(3, SceneConfig(num_objects=(0, 0)))
        assert len(s.gts) == 0
        assert s.image.shape == (64, 64, 3)
        assert abs(s.image.mean() - 0.5) < 0.01

    @pytest.mark.parametrize("seed", range(10))
    def test_object_count_and_labels(self, seed):
        cfg = SceneConfig(num_objects=(1, 4), num_classes=5, size_range=(0.1, 0.2))
        s = generate_scene(seed, cfg)
        assert 1 <= len(s.gts) <= 4
        assert np.all((s.gts.labels >= 0) & (s.gts.labels < 5))

    @pytest.mark.parametrize("seed", range(20))
    def test_boxes_inside_image(self, seed):
        s = generate_scene(seed)
        for box in s.gts.boxes:
            c = corners(box)
            assert c.min() >= 0.0 and c.max() <= 1.0

    @pytest.mark.parametrize("seed", range(10))
    def test_overlap_limit(self, seed):
        cfg = SceneConfig(num_objects=(4, 4), size_range=(0.2, 0.3), max_overlap=0.1)
        s = generate_scene(seed, cfg)
        iou = pairwise_iou(s.gts.boxes, s.gts.boxes)
        assert np.all(iou[~np.eye(4, dtype=bool)] <= 0.1)

    def test_dense_packing_allows_overlap(self):
        cfg = SceneConfig(num_objects=(6, 6), size_range=(0.3, 0.4), max_overlap=1.0)
        iou = pairwise_iou(generate_scene(0, cfg).gts.boxes, generate_scene(0, cfg).gts.boxes)
        assert iou[~np.eye(6, dtype=bool)].max() > 0.0

    def test_unsatisfiable_placement_raises(self):
        cfg = SceneConfig(num_objects=(8, 8), size_range=(0.45, 0.5), aspect_range=(0.9, 1.0), max_tries=50)
        with pytest.raises(GenerationError):
            generate_scene(0, cfg)

    @pytest.mark.parametrize("seed", range(12))
    def test_mask_area_matches_box_area(self, seed):
        s = generate_scene(seed)
        S = s.image.shape[0]
        for box, cov in zip(s.gts.boxes, s.coverage):
            expected = box[2] * box[3] * S * S
            assert abs(cov.sum() - expected) <= 0.02 * expected
            assert abs(pixel_count(box, S) - expected) <= 0.02 * expected

    def test_fully_covered_pixels_carry_class_colour(self):
        s = generate_scene(5, SceneConfig(num_objects=(1, 1), noise=0.2))
        cov = s.coverage[0]
        inside = s.image[cov == 1.0]
        colour = class_color(int(s.gts.labels[0]), 3)
        # stripes only scale brightness, so chromaticity matches the class colour
        ratio = inside / colour
        np.testing.assert_allclose(ratio, ratio[:, :1].repeat(3, axis=1), rtol=1e-12)
        assert ratio.min() >= 0.7 - 1e-12 and ratio.max() <= 1.0 + 1e-12

    def test_class_colours_distinct(self):
        cols = [tuple(class_color(c, 3).round(6)) for c in range(3)]
        assert len(set(cols)) == 3

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_pure_function_of_seed(self, seed):
        cfg = SceneConfig(image_size=32)
        assert np.array_equal(generate_scene(seed, cfg).image, generate_scene(seed, cfg).image)


class TestCoverage:
    def test_axis_aligned_box_exact(self):
        cov = box_coverage((0.5, 0.5, 0.5, 0.25, 0.0), 16, 4)
        assert cov.sum() == pytest.approx(0.5 * 0.25 * 256)
        assert cov.max() == 1.0 and cov.min() == 0.0


class TestFlip:
    def test_hflip_is_involution(self):
        s = generate_scene(4)
        back = hflip(hflip(s))
        assert np.array_equal(back.image, s.image)
        np.testing.assert_allclose(back.gts.boxes, s.gts.boxes, atol=1e-15)

    def test_hflip_boxes_match_flipped_coverage(self):
        s = generate_scene(6)
        f = hflip(s)
        for box, cov in zip(f.gts.boxes, f.coverage):
            np.testing.assert_allclose(box_coverage(box, 64, 4), cov, atol=1e-12)


class TestSerialization:
    def test_json_fields(self):
        d = generate_scene(2).to_dict()
        assert set(d) == {"seed", "image_shape", "objects"}
        assert set(d["objects"][0]) == {"cx", "cy", "w", "h", "alpha_radians", "class"}
        json.dumps(d)

    def test_roundtrip(self, tmp_path):
        scenes = [generate_scene(s) for s in scene_seeds(1, 3)]
        path = save_scenes(scenes, tmp_path, dump_images=True)
        loaded = load_scene_annotations(path)
        for scene, (seed, gts) in zip(scenes, loaded):
            assert seed == scene.seed
            assert np.array_equal(gts.boxes, scene.gts.boxes)
            assert list(gts.labels) == list(scene.gts.labels)
            assert np.array_equal(np.load(tmp_path / f"scene_{seed}.npy"), scene.image)
            assert np.array_equal(generate_scene(seed).image, scene.image)

    def test_dataset_from_config(self):
        cfg = preset("overfit")
        scenes = make_dataset(cfg)
        assert len(scenes) == cfg.dataset.num_scenes
        assert [s.seed for s in scenes] == scene_seeds(cfg.dataset.seed, cfg.dataset.num_scenes)
