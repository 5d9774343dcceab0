import numpy as np
import pytest

from nightfuse.core import IGNORE, DimensionMismatch, GrayImage, InvalidParams, LabelMask
from nightfuse.warp import (
    CameraIntrinsics,
    DepthMap,
    RigidTransform,
    warp_labels,
    warp_to_event_frame,
)

from oracles import o_project

K = CameraIntrinsics(fx=120.0, fy=110.0, cx=16.0, cy=12.0)
SIZE = (32, 24)  # width, height


def gray(arr):
    arr = np.asarray(arr, dtype=np.float64)
    return GrayImage(arr.shape[1], arr.shape[0], arr)


def flat_depth(value, w=32, h=24):
    return DepthMap(w, h, np.full((h, w), value))


class TestContainers:
    def test_intrinsics_positive_focal(self):
        with pytest.raises(InvalidParams):
            CameraIntrinsics(0.0, 1.0, 0.0, 0.0)

    def test_rotation_orthonormality(self):
        with pytest.raises(InvalidParams):
            RigidTransform(np.eye(3) * 1.001, np.zeros(3))

    def test_rotation_determinant(self):
        flip = np.diag([1.0, 1.0, -1.0])
        with pytest.raises(InvalidParams):
            RigidTransform(flip, np.zeros(3))

    def test_inverse_composes_to_identity(self):
        angle = 0.3
        rot = np.array([[np.cos(angle), -np.sin(angle), 0],
                        [np.sin(angle), np.cos(angle), 0],
                        [0, 0, 1.0]])
        t = RigidTransform(rot, [0.1, -0.2, 0.05])
        inv = t.inverse()
        assert np.allclose(inv.rotation @ t.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(inv.rotation @ t.translation + inv.translation, 0.0, atol=1e-12)

    def test_depth_validation(self):
        DepthMap(2, 2, [[1.0, np.nan], [0.0, 3.0]])
        with pytest.raises(InvalidParams):
            DepthMap(1, 1, [[-1.0]])
        with pytest.raises(InvalidParams):
            DepthMap(1, 1, [[np.inf]])


class TestWarpImage:
    def test_identity_geometry_exact(self):
        rng = np.random.default_rng(40)
        img = gray(rng.random((24, 32)))
        res = warp_to_event_frame(img, flat_depth(5.0), K, K,
                                  RigidTransform.identity(), SIZE)
        assert res.valid.all()
        assert np.array_equal(res.image.data, img.data)
        assert np.allclose(res.depth, 5.0)

    def test_pure_translation_matches_pinhole_oracle(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            tx = float(rng.uniform(-0.4, 0.4))
            d = float(rng.uniform(2.0, 10.0))
            img_arr = np.zeros((24, 32))
            marker = (12, 10)  # y, x
            img_arr[marker] = 1.0
            t = RigidTransform(np.eye(3), [tx, 0.0, 0.0])
            res = warp_to_event_frame(gray(img_arr), flat_depth(d), K, K, t, SIZE)
            exp_u, exp_v, _ = o_project(marker[1], marker[0], d, K, K, np.eye(3).tolist(),
                                        [tx, 0.0, 0.0])
            ys, xs = np.nonzero(res.image.data == 1.0)
            if 0 <= exp_u <= SIZE[0] - 1:
                assert len(xs) == 1
                assert abs(xs[0] - exp_u) <= 0.51
                assert abs(ys[0] - exp_v) <= 0.51
                assert abs(exp_u - (marker[1] + K.fx * tx / d)) < 1e-9

    def test_invalid_depth_everywhere(self):
        img = gray(np.random.default_rng(42).random((24, 32)))
        res = warp_to_event_frame(img, flat_depth(np.nan), K, K,
                                  RigidTransform.identity(), SIZE)
        assert not res.valid.any()

    def test_dimension_mismatch(self):
        img = gray(np.zeros((4, 4)))
        with pytest.raises(DimensionMismatch):
            warp_to_event_frame(img, flat_depth(1.0), K, K, RigidTransform.identity(), SIZE)

    def test_round_trip_within_one_pixel(self):
        rng = np.random.default_rng(43)
        img_arr = np.zeros((24, 32))
        markers = [(6, 7), (15, 20), (20, 4)]
        for i, (my, mx) in enumerate(markers):
            img_arr[my, mx] = 0.3 + 0.2 * i
        angle = 0.05
        rot = np.array([[np.cos(angle), 0, np.sin(angle)],
                        [0, 1, 0],
                        [-np.sin(angle), 0, np.cos(angle)]])
        t = RigidTransform(rot, [0.15, -0.1, 0.2])
        fwd = warp_to_event_frame(gray(img_arr), flat_depth(5.0), K, K, t, SIZE)
        depth_fwd = DepthMap(SIZE[0], SIZE[1], np.where(fwd.valid, fwd.depth, np.nan))
        back = warp_to_event_frame(fwd.image, depth_fwd, K, K, t.inverse(), SIZE)
        for my, mx in markers:
            val = img_arr[my, mx]
            ys, xs = np.nonzero(back.image.data == val)
            assert len(xs) >= 1
            dist = np.hypot(xs - mx, ys - my).min()
            assert dist <= 1.0


class TestWarpLabels:
    def test_identity_geometry(self):
        rng = np.random.default_rng(44)
        labels = rng.integers(0, 5, size=(24, 32)).astype(np.int32)
        mask = LabelMask(32, 24, labels, 5)
        out = warp_labels(mask, flat_depth(3.0), K, K, RigidTransform.identity(), SIZE)
        assert np.array_equal(out.labels, labels)

    def test_all_ignore_passes_through(self):
        mask = LabelMask(32, 24, np.full((24, 32), IGNORE, dtype=np.int32), 5)
        out = warp_labels(mask, flat_depth(3.0), K, K, RigidTransform.identity(), SIZE)
        assert np.all(out.labels == IGNORE)

    def test_single_pixel_translation_lands_at_oracle(self):
        labels = np.zeros((24, 32), dtype=np.int32)
        labels[12, 10] = 3
        tx, d = 0.21, 4.0
        t = RigidTransform(np.eye(3), [tx, 0.0, 0.0])
        out = warp_labels(LabelMask(32, 24, labels, 4), flat_depth(d), K, K, t, SIZE)
        exp_u, exp_v, _ = o_project(10, 12, d, K, K, np.eye(3).tolist(), [tx, 0.0, 0.0])
        ys, xs = np.nonzero(out.labels == 3)
        assert len(xs) == 1
        assert abs(xs[0] - exp_u) <= 0.51 and abs(ys[0] - exp_v) <= 0.51

    def test_never_invents_class_ids(self):
        rng = np.random.default_rng(45)
        labels = rng.choice([0, 2, IGNORE], size=(24, 32)).astype(np.int32)
        mask = LabelMask(32, 24, labels, 5)
        t = RigidTransform(np.eye(3), [0.1, 0.05, -0.2])
        out = warp_labels(mask, flat_depth(4.0), K, K, t, SIZE)
        assert set(np.unique(out.labels)) <= {0, 2, IGNORE}

    def test_unwritten_pixels_are_ignore(self):
        labels = np.zeros((24, 32), dtype=np.int32)
        mask = LabelMask(32, 24, labels, 2)
        t = RigidTransform(np.eye(3), [2.0, 0.0, 0.0])  # push content out of frame
        out = warp_labels(mask, flat_depth(1.0), K, K, t, SIZE)
        assert (out.labels == IGNORE).any()
