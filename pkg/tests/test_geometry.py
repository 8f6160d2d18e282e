"""Orientation algebra, projection, rotated IoU, and NMS tests."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereodet3d.errors import InputError
from stereodet3d.geometry import (
    OrientationEncoding,
    alpha_to_ry,
    back_project,
    decode_orientation,
    encode_orientation,
    iou_2d,
    iou_2d_matrix,
    iou_3d,
    iou_bev,
    nms,
    project_to_image,
    ry_to_alpha,
    wrap_angle,
)

from conftest import detection_from_annotation, make_annotation


class TestOrientation:
    def test_zero(self):
        enc = encode_orientation(0.0)
        assert (enc.sin2a, enc.cos2a, enc.facing) == (0.0, 1.0, False)

    def test_ambiguity_pair_shares_encoding(self):
        a = encode_orientation(math.pi / 4)
        b = encode_orientation(math.pi / 4 - math.pi)
        assert a.sin2a == pytest.approx(b.sin2a, abs=1e-12)
        assert a.cos2a == pytest.approx(b.cos2a, abs=1e-12)
        assert a.facing is False and b.facing is True

    def test_direct_trig_value(self):
        enc = encode_orientation(1.2)
        assert enc.sin2a == pytest.approx(math.sin(2.4), abs=1e-12)
        assert enc.cos2a == pytest.approx(math.cos(2.4), abs=1e-12)
        # 1.2 < pi/2, so the object is not facing the camera
        assert enc.facing is False

    def test_facing_boundary_maps_false(self):
        assert encode_orientation(math.pi / 2).facing is False
        assert encode_orientation(-math.pi / 2).facing is False
        assert encode_orientation(math.pi / 2 + 1e-6).facing is True

    def test_decode_basics(self):
        assert decode_orientation(OrientationEncoding(0.0, 1.0, False)) == 0.0
        assert decode_orientation(OrientationEncoding(0.0, 1.0, True)) == pytest.approx(
            math.pi
        )

    def test_zero_vector_rejected(self):
        with pytest.raises(InputError, match="zero"):
            decode_orientation(OrientationEncoding(0.0, 0.0, False))

    def test_out_of_range_alpha_rejected(self):
        with pytest.raises(InputError):
            encode_orientation(4.0)

    def test_roundtrip_1000_angles(self):
        rng = np.random.default_rng(0)
        alphas = rng.uniform(-math.pi + 1e-9, math.pi, 1000)
        alphas = alphas[np.abs(np.abs(alphas) - math.pi / 2) > 1e-6]
        worst = 0.0
        for a in alphas:
            back = decode_orientation(encode_orientation(float(a)))
            worst = max(worst, abs(wrap_angle(back - a)))
        assert worst < 1e-6


class TestYawRelation:
    def test_zero_lateral_offset(self):
        assert alpha_to_ry(0.3, 0.0, 10.0) == pytest.approx(0.3)

    def test_quarter_turn(self):
        assert alpha_to_ry(0.0, 5.0, 5.0) == pytest.approx(math.pi / 4)

    def test_roundtrip(self, rng):
        for _ in range(200):
            alpha = float(rng.uniform(-math.pi + 1e-9, math.pi))
            x = float(rng.uniform(-30, 30))
            z = float(rng.uniform(0.5, 80))
            ry = alpha_to_ry(alpha, x, z)
            assert abs(wrap_angle(ry_to_alpha(ry, x, z) - alpha)) < 1e-9

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(InputError, match="positive"):
            alpha_to_ry(0.0, 1.0, 0.0)
        with pytest.raises(InputError, match="positive"):
            ry_to_alpha(0.0, 1.0, -2.0)


class TestProjection:
    def test_optical_axis(self, simple_calib):
        u, v = project_to_image((0.0, 0.0, 10.0), simple_calib)
        assert (u, v) == (simple_calib.cx, simple_calib.cy)

    def test_backprojection_roundtrip(self, kitti_calib, rng):
        for _ in range(100):
            x = float(rng.uniform(-30, 30))
            y = float(rng.uniform(-2, 4))
            z = float(rng.uniform(1, 80))
            u, v = project_to_image((x, y, z), kitti_calib)
            xb, yb = back_project(u, v, z, kitti_calib)
            assert xb == pytest.approx(x, abs=1e-6)
            assert yb == pytest.approx(y, abs=1e-6)

    def test_backprojection_roundtrip_simple(self, simple_calib, rng):
        for _ in range(100):
            x, y, z = rng.uniform(-10, 10), rng.uniform(-2, 4), rng.uniform(1, 50)
            u, v = project_to_image((float(x), float(y), float(z)), simple_calib)
            xb, yb = back_project(u, v, float(z), simple_calib)
            assert xb == pytest.approx(x, abs=1e-9)
            assert yb == pytest.approx(y, abs=1e-9)

    def test_behind_camera_rejected(self, simple_calib):
        with pytest.raises(InputError, match="behind"):
            project_to_image((0.0, 0.0, -1.0), simple_calib)


class TestIou2d:
    def test_identical(self):
        assert iou_2d((0, 0, 2, 3), (0, 0, 2, 3)) == 1.0

    def test_disjoint(self):
        assert iou_2d((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0

    def test_half_overlap_hand_value(self):
        # unit squares overlapping in a 0.5 x 1 strip: 0.5 / 1.5
        assert iou_2d((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3)

    def test_matrix_matches_scalar(self, rng):
        a = np.sort(rng.uniform(0, 10, (5, 2, 2)), axis=2).reshape(5, 4)[:, [0, 2, 1, 3]]
        b = np.sort(rng.uniform(0, 10, (4, 2, 2)), axis=2).reshape(4, 4)[:, [0, 2, 1, 3]]
        m = iou_2d_matrix(a, b)
        for i in range(5):
            for j in range(4):
                assert m[i, j] == pytest.approx(iou_2d(a[i], b[j]), abs=1e-12)

    @given(st.integers(0, 100))
    @settings(max_examples=40, deadline=None)
    def test_symmetry_and_range(self, seed):
        r = np.random.default_rng(seed)
        def box():
            x1, y1 = r.uniform(0, 5, 2)
            return (x1, y1, x1 + r.uniform(0.1, 5), y1 + r.uniform(0.1, 5))
        a, b = box(), box()
        ab, ba = iou_2d(a, b), iou_2d(b, a)
        assert ab == pytest.approx(ba, abs=1e-12)
        assert 0.0 <= ab <= 1.0


def _bev_monte_carlo(a, b, n=1_000_000, seed=0):
    """Point-sampling IoU estimate over the union's bounding box."""
    rng = np.random.default_rng(seed)

    def corners(box):
        cx, cz, w, l, yaw = box
        c, s = math.cos(yaw), math.sin(yaw)
        pts = np.array([[l / 2, w / 2], [l / 2, -w / 2], [-l / 2, -w / 2], [-l / 2, w / 2]])
        return pts @ np.array([[c, -s], [s, c]]).T + (cx, cz)

    def inside(pts, box):
        cx, cz, w, l, yaw = box
        rel = pts - (cx, cz)
        c, s = math.cos(yaw), math.sin(yaw)
        lx = rel[:, 0] * c + rel[:, 1] * s
        lz = -rel[:, 0] * s + rel[:, 1] * c
        return (np.abs(lx) <= l / 2) & (np.abs(lz) <= w / 2)

    all_corners = np.vstack([corners(a), corners(b)])
    lo, hi = all_corners.min(axis=0), all_corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    in_a, in_b = inside(pts, a), inside(pts, b)
    box_area = float(np.prod(hi - lo))
    inter = in_a & in_b
    union = in_a | in_b
    if union.sum() == 0:
        return 0.0
    return float(inter.sum()) / float(union.sum())


class TestIouBev:
    def test_identical(self):
        box = (1.0, 5.0, 1.8, 4.2, 0.7)
        assert iou_bev(box, box) == pytest.approx(1.0, abs=1e-12)

    def test_rotated_square_symmetry(self):
        a = (0.0, 0.0, 2.0, 2.0, 0.0)
        b = (0.0, 0.0, 2.0, 2.0, math.pi / 2)
        assert iou_bev(a, b) == pytest.approx(1.0, abs=1e-9)

    def test_against_monte_carlo(self, rng):
        for i in range(100):
            a = (
                rng.uniform(-2, 2), rng.uniform(-2, 2),
                rng.uniform(0.5, 3), rng.uniform(0.5, 4), rng.uniform(-math.pi, math.pi),
            )
            b = (
                a[0] + rng.uniform(-2, 2), a[1] + rng.uniform(-2, 2),
                rng.uniform(0.5, 3), rng.uniform(0.5, 4), rng.uniform(-math.pi, math.pi),
            )
            exact = iou_bev(a, b)
            estimate = _bev_monte_carlo(a, b, seed=i)
            assert abs(exact - estimate) < 0.01

    def test_rotation_covariance(self, rng):
        for _ in range(25):
            a = (rng.uniform(-2, 2), rng.uniform(-2, 2), 1.5, 3.5, rng.uniform(-1, 1))
            b = (rng.uniform(-2, 2), rng.uniform(-2, 2), 2.0, 2.5, rng.uniform(-1, 1))
            base = iou_bev(a, b)
            theta = float(rng.uniform(-math.pi, math.pi))
            c, s = math.cos(theta), math.sin(theta)

            def rot(box):
                x, z, w, l, yaw = box
                return (c * x - s * z, s * x + c * z, w, l, yaw + theta)

            assert abs(iou_bev(rot(a), rot(b)) - base) < 1e-9

    def test_bad_dims_rejected(self):
        with pytest.raises(InputError):
            iou_bev((0, 0, 0.0, 1, 0), (0, 0, 1, 1, 0))


class TestIou3d:
    def test_identical(self):
        box = (1.0, 1.6, 12.0, 1.8, 1.5, 4.0, 0.3)
        assert iou_3d(box, box) == pytest.approx(1.0, abs=1e-12)

    def test_vertically_disjoint(self):
        a = (0.0, 0.0, 10.0, 2.0, 1.5, 4.0, 0.0)
        b = (0.0, 5.0, 10.0, 2.0, 1.5, 4.0, 0.0)
        assert iou_3d(a, b) == 0.0

    def test_axis_aligned_closed_form(self):
        # yaw 0: length runs along x, width along z; intersect the three
        # intervals directly and form the closed-form volume IoU
        a = (0.0, 1.5, 10.0, 2.0, 1.5, 4.0, 0.0)
        b = (1.0, 1.8, 11.0, 2.0, 1.5, 4.0, 0.0)
        inter_x = min(0.0 + 2.0, 1.0 + 2.0) - max(0.0 - 2.0, 1.0 - 2.0)
        inter_z = min(10.0 + 1.0, 11.0 + 1.0) - max(10.0 - 1.0, 11.0 - 1.0)
        inter_y = min(1.5, 1.8) - max(1.5 - 1.5, 1.8 - 1.5)
        inter = inter_x * inter_z * inter_y
        vol = 2.0 * 1.5 * 4.0
        expected = inter / (2 * vol - inter)
        assert iou_3d(a, b) == pytest.approx(expected, abs=1e-9)


class TestNms:
    def test_single_detection(self):
        det = detection_from_annotation(make_annotation(), score=0.5)
        assert nms([det], 0.5) == [det]

    def test_two_identical_boxes(self):
        hi = detection_from_annotation(make_annotation(), score=0.9)
        lo = detection_from_annotation(make_annotation(), score=0.8)
        out = nms([lo, hi], 0.5)
        assert out == [hi]

    def test_matches_quadratic_oracle(self, rng):
        def oracle(dets, thr):
            order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
            kept = []
            for i in order:
                if all(iou_2d(dets[i].box2d, dets[j].box2d) <= thr for j in kept):
                    kept.append(i)
            return [dets[i] for i in kept]

        for trial in range(20):
            dets = []
            for _ in range(int(rng.integers(1, 25))):
                x1, y1 = rng.uniform(0, 40, 2)
                dets.append(
                    detection_from_annotation(
                        make_annotation(
                            box2d=(x1, y1, x1 + rng.uniform(5, 30), y1 + rng.uniform(5, 30))
                        ),
                        score=float(rng.uniform(0, 1)),
                    )
                )
            thr = float(rng.uniform(0.1, 0.9))
            assert nms(dets, thr) == oracle(dets, thr)

    def test_survivors_pairwise_below_threshold(self, rng):
        dets = []
        for _ in range(30):
            x1, y1 = rng.uniform(0, 30, 2)
            dets.append(
                detection_from_annotation(
                    make_annotation(box2d=(x1, y1, x1 + 10, y1 + 10)),
                    score=float(rng.uniform(0, 1)),
                )
            )
        out = nms(dets, 0.3)
        for i in range(len(out)):
            for j in range(i + 1, len(out)):
                assert iou_2d(out[i].box2d, out[j].box2d) <= 0.3

    def test_invalid_threshold(self):
        with pytest.raises(InputError):
            nms([], 1.5)
