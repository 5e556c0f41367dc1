import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rotdetr import tensor as T
from rotdetr.geometry import (HALF_PI, RotatedBox, angle_wrap_count, clip_polygons, monte_carlo_iou,
                              normalize_angle, pairwise_iou, roi_level, rotated_iou, rotated_iou_with_grad,
                              rotated_roi_align, to_polygon)
from rotdetr.pyramid import FeaturePyramid

coord = st.floats(0.2, 0.8)
extent = st.floats(0.05, 0.5)
angle = st.floats(-HALF_PI, HALF_PI, exclude_max=True)
boxes = st.tuples(coord, coord, extent, extent, angle)


def axis_aligned_iou(a, b):
    ax0, ax1, ay0, ay1 = a[0] - a[2] / 2, a[0] + a[2] / 2, a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1, by0, by1 = b[0] - b[2] / 2, b[0] + b[2] / 2, b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


class TestAngles:
    @pytest.mark.parametrize("a,expected", [(0.0, 0.0), (HALF_PI, -HALF_PI), (-HALF_PI, -HALF_PI),
                                            (math.pi, 0.0), (3.0, 3.0 - math.pi), (-2.0, -2.0 + math.pi)])
    def test_normalize_examples(self, a, expected):
        assert normalize_angle(a) == pytest.approx(expected, abs=1e-15)

    @given(st.floats(-50, 50))
    def test_normalize_range_and_period(self, a):
        n = normalize_angle(a)
        assert -HALF_PI <= n < HALF_PI
        k = (a - n) / math.pi
        assert abs(k - round(k)) < 1e-9

    def test_wrap_count_matches_normalize(self):
        a = np.array([0.3, 2.0, -4.0, 7.5, HALF_PI])
        k = angle_wrap_count(a)
        np.testing.assert_allclose(a - k * math.pi, [normalize_angle(v) for v in a], atol=1e-12)

    def test_box_rejects_nonpositive_extent(self):
        with pytest.raises(ValueError):
            RotatedBox(0.5, 0.5, 0.0, 0.1)

    def test_box_normalizes_angle(self):
        assert RotatedBox(0.5, 0.5, 0.2, 0.1, math.pi + 0.25).alpha == pytest.approx(0.25)


class TestPolygons:
    @given(boxes)
    def test_polygon_area_is_positive_box_area(self, b):
        poly = to_polygon(b)
        assert poly.area == pytest.approx(b[2] * b[3], rel=1e-12)

    def test_clip_of_disjoint_is_empty(self):
        a, b = to_polygon((0.2, 0.2, 0.1, 0.1, 0.0)), to_polygon((0.8, 0.8, 0.1, 0.1, 0.3))
        assert clip_polygons(a, b).is_empty

    def test_clip_contained_returns_inner(self):
        outer, inner = to_polygon((0.5, 0.5, 0.6, 0.6, 0.0)), to_polygon((0.5, 0.5, 0.2, 0.1, 0.4))
        assert clip_polygons(inner, outer).area == pytest.approx(0.02, rel=1e-12)


class TestRotatedIoU:
    def test_identical_is_one(self):
        assert rotated_iou((0.4, 0.6, 0.3, 0.1, 0.7), (0.4, 0.6, 0.3, 0.1, 0.7)) == 1.0

    def test_disjoint_is_zero(self):
        assert rotated_iou((0.2, 0.2, 0.1, 0.1, 0.3), (0.8, 0.8, 0.1, 0.1, -0.3)) == 0.0

    def test_square_vs_rotated_square(self):
        iou = rotated_iou((0.5, 0.5, 0.2, 0.2, 0.0), (0.5, 0.5, 0.2, 0.2, math.pi / 4))
        # octagon area / (2 - octagon area) for unit squares
        octagon = 2.0 * (math.sqrt(2) - 1.0)
        assert iou == pytest.approx(octagon / (2.0 - octagon), abs=1e-12)

    def test_square_rotated_by_quarter_turn_is_itself(self):
        assert rotated_iou((0.5, 0.5, 0.2, 0.2, 0.0), (0.5, 0.5, 0.2, 0.2, -HALF_PI)) == pytest.approx(1.0, abs=1e-12)

    def test_swapping_edges_with_quarter_turn_is_same_box(self):
        a = (0.5, 0.5, 0.3, 0.1, 0.2)
        b = (0.5, 0.5, 0.1, 0.3, normalize_angle(0.2 + HALF_PI))
        assert rotated_iou(a, b) == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(coord, coord, extent, extent, coord, coord, extent, extent)
    def test_axis_aligned_closed_form(self, ax, ay, aw, ah, bx, by, bw, bh):
        a, b = (ax, ay, aw, ah, 0.0), (bx, by, bw, bh, 0.0)
        assert abs(rotated_iou(a, b) - axis_aligned_iou(a, b)) <= 1e-12

    @settings(max_examples=200, deadline=None)
    @given(boxes, boxes)
    def test_range_and_symmetry(self, a, b):
        ab, ba = rotated_iou(a, b), rotated_iou(b, a)
        assert 0.0 <= ab <= 1.0
        assert ab == pytest.approx(ba, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(boxes, boxes, st.floats(-0.3, 0.3), st.floats(-0.3, 0.3))
    def test_translation_invariance(self, a, b, dx, dy):
        a2 = (a[0] + dx, a[1] + dy) + a[2:]
        b2 = (b[0] + dx, b[1] + dy) + b[2:]
        assert rotated_iou(a, b) == pytest.approx(rotated_iou(a2, b2), abs=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(boxes, boxes, st.floats(-math.pi, math.pi))
    def test_joint_rotation_invariance(self, a, b, theta):
        c, s = math.cos(theta), math.sin(theta)

        def rot(box):
            x, y = box[0] - 0.5, box[1] - 0.5
            return (0.5 + c * x - s * y, 0.5 + s * x + c * y, box[2], box[3], normalize_angle(box[4] + theta))

        assert rotated_iou(a, b) == pytest.approx(rotated_iou(rot(a), rot(b)), abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(boxes, st.floats(0.1, 0.9))
    def test_nested_ratio(self, a, k):
        inner = a[:2] + (a[2] * k, a[3] * k, a[4])
        assert rotated_iou(a, inner) == pytest.approx(k * k, rel=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_monte_carlo_agreement(self, seed):
        rng = np.random.default_rng(seed)
        a = (rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6), rng.uniform(0.2, 0.4), rng.uniform(0.1, 0.3), rng.uniform(-1.5, 1.5))
        b = (rng.uniform(0.4, 0.6), rng.uniform(0.4, 0.6), rng.uniform(0.2, 0.4), rng.uniform(0.1, 0.3), rng.uniform(-1.5, 1.5))
        assert abs(rotated_iou(a, b) - monte_carlo_iou(a, b, 200_000, seed)) < 6e-3

    def test_pairwise_shape(self):
        m = pairwise_iou(np.array([[0.5, 0.5, 0.2, 0.1, 0.0]] * 3), np.array([[0.5, 0.5, 0.2, 0.1, 0.0]] * 2))
        assert m.shape == (3, 2)
        np.testing.assert_array_equal(m, 1.0)


class TestIoUGradient:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        a = np.array([0.5, 0.5, 0.3, 0.15, rng.uniform(-1.4, 1.4)])
        b = np.array([rng.uniform(0.45, 0.55), rng.uniform(0.45, 0.55), 0.25, 0.2, rng.uniform(-1.4, 1.4)])
        _, ga, gb = rotated_iou_with_grad(a, b)
        for box, g, other, first in ((a, ga, b, True), (b, gb, a, False)):
            num = np.zeros(5)
            for k in range(5):
                p, m = box.copy(), box.copy()
                p[k] += 1e-6
                m[k] -= 1e-6
                fp = rotated_iou(p, other) if first else rotated_iou(other, p)
                fm = rotated_iou(m, other) if first else rotated_iou(other, m)
                num[k] = (fp - fm) / 2e-6
            assert T.relative_error(g, num) < 1e-5

    def test_disjoint_has_zero_gradient(self):
        iou, ga, gb = rotated_iou_with_grad((0.1, 0.1, 0.05, 0.05, 0.0), (0.9, 0.9, 0.05, 0.05, 0.0))
        assert iou == 0.0 and not ga.any() and not gb.any()


def _ramp_pyramid(H=8, W=8, C=2):
    ys, xs = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    level = np.stack([xs, ys][:C], axis=-1)
    coarse = np.zeros((H // 2, W // 2, C))
    return FeaturePyramid([T.Tensor(level), T.Tensor(coarse)], [8, 16])


class TestRoiAlign:
    def test_axis_aligned_box_reads_coordinates(self):
        pyr = _ramp_pyramid()
        box = (0.5, 0.5, 0.5, 0.25, 0.0)  # 4x2 cells centred on the map
        patch, cover = rotated_roi_align(pyr, box, out_size=4, level=0)
        u = 0.5 * 8 - 0.5 + (np.arange(4) + 0.5) / 4 * 4 - 2
        v = 0.5 * 8 - 0.5 + (np.arange(4) + 0.5) / 4 * 2 - 1
        np.testing.assert_allclose(patch.data[:, :, 0], np.broadcast_to(u[None, :], (4, 4)), atol=1e-12)
        np.testing.assert_allclose(patch.data[:, :, 1], np.broadcast_to(v[:, None], (4, 4)), atol=1e-12)
        assert cover == 1.0

    def test_quarter_turn_swaps_axes(self):
        pyr = _ramp_pyramid()
        patch, _ = rotated_roi_align(pyr, (0.5, 0.5, 0.5, 0.5, -HALF_PI), out_size=3, level=0)
        # columns now run along -y, rows along +x
        assert np.all(np.diff(patch.data[0, :, 1]) < 0)
        assert np.all(np.diff(patch.data[:, 0, 0]) > 0)

    def test_constant_map_gives_constant_patch(self):
        pyr = FeaturePyramid([T.Tensor(np.full((8, 8, 3), 2.5)), T.Tensor(np.zeros((4, 4, 3)))], [8, 16])
        patch, _ = rotated_roi_align(pyr, (0.5, 0.5, 0.4, 0.3, 0.7), out_size=7, level=0)
        np.testing.assert_allclose(patch.data, 2.5, rtol=1e-12)

    def test_box_off_the_map_reports_coverage(self):
        pyr = _ramp_pyramid()
        _, cover = rotated_roi_align(pyr, (0.98, 0.5, 0.4, 0.4, 0.0), out_size=4, level=0)
        assert 0.0 < cover < 1.0

    def test_level_grows_with_box_size(self):
        pyr = FeaturePyramid([T.Tensor(np.zeros((32, 32, 1))), T.Tensor(np.zeros((16, 16, 1))),
                              T.Tensor(np.zeros((8, 8, 1)))], [8, 16, 32])
        levels = [roi_level((0.5, 0.5, s, s, 0.0), pyr, canonical_cells=4.0) for s in (0.05, 0.3, 0.6, 0.95)]
        assert levels == sorted(levels)
        assert levels[0] == 0 and levels[-1] == 2
