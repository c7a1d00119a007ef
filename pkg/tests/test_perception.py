import math

import numpy as np
import pytest

from d3a.core import RawDetection, RobotPose, unit
from d3a.perception import (
    CameraModel,
    SynthDetectorParams,
    bbox_for,
    color_histogram,
    frame_rng,
    project_to_world,
    synth_embedding,
)

CAM = CameraModel()


def det_at_u(u, depth):
    return RawDetection("cup", 0.9, (u - 5.0, 200.0, u + 5.0, 280.0), unit([1.0]), depth)


class TestSynthEmbedding:
    def test_clean_is_one_hot(self):
        v = synth_embedding(3, SynthDetectorParams(8), np.random.default_rng(0))
        expected = np.zeros(8)
        expected[3] = 1.0
        np.testing.assert_array_equal(v, expected)

    def test_forced_miss(self):
        p = SynthDetectorParams(8, fnr=1.0)
        rng = np.random.default_rng(1)
        assert all(synth_embedding(i % 8, p, rng) is None for i in range(50))

    def test_index_out_of_range(self):
        with pytest.raises(ValueError):
            synth_embedding(8, SynthDetectorParams(8), np.random.default_rng(0))

    def test_params_validation(self):
        with pytest.raises(ValueError):
            SynthDetectorParams(8, fpr=1.5)
        with pytest.raises(ValueError):
            SynthDetectorParams(0)

    def test_always_unit_norm(self):
        p = SynthDetectorParams(10, fpr=0.3)
        rng = np.random.default_rng(2)
        for i in range(200):
            assert np.linalg.norm(synth_embedding(i % 10, p, rng)) == pytest.approx(1.0)

    def test_mean_flips_match_fpr(self):
        # N=20, fpr=0.1: expected Hamming distance to the clean one-hot is 2
        n, fpr, draws = 20, 0.1, 20_000
        p = SynthDetectorParams(n, fpr=fpr)
        rng = np.random.default_rng(3)
        total = 0
        for k in range(draws):
            idx = k % n
            v = synth_embedding(idx, p, rng)
            bits = (v > 0).astype(int)
            clean = np.zeros(n, dtype=int)
            clean[idx] = 1
            total += int(np.sum(bits != clean))
        assert total / draws == pytest.approx(n * fpr, rel=0.05)

    def test_frame_rng_reproducible(self):
        a = frame_rng(7, 11).random(5)
        b = frame_rng(7, 11).random(5)
        c = frame_rng(7, 12).random(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestColorHistogram:
    def test_uniform_crop_is_one_hot(self):
        crop = np.full((6, 5, 3), (250, 10, 130), dtype=np.uint8)
        h = color_histogram(crop, 4)
        # bins: r=3, g=0, b=2 -> (3*4+0)*4+2
        expected = np.zeros(64)
        expected[50] = 1.0
        np.testing.assert_array_equal(h, expected)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(0)
        crop = rng.integers(0, 256, size=(8, 8, 3))
        flat = crop.reshape(-1, 3)
        shuffled = flat[rng.permutation(len(flat))].reshape(8, 8, 3)
        np.testing.assert_array_equal(color_histogram(crop), color_histogram(shuffled))

    def test_two_colours_half_each(self):
        crop = np.array([[[0, 0, 0], [255, 255, 255]]])
        h = color_histogram(crop, 4)
        assert np.count_nonzero(h) == 2
        assert h[0] == pytest.approx(1 / math.sqrt(2))
        assert h[63] == pytest.approx(1 / math.sqrt(2))

    def test_dimension_is_bins_cubed(self):
        assert color_histogram(np.zeros((1, 1, 3)), 6).shape == (216,)

    def test_empty_crop(self):
        with pytest.raises(ValueError):
            color_histogram(np.zeros((0, 3)))


class TestProjection:
    def test_center_origin(self):
        p = project_to_world(det_at_u(320, 2.0), RobotPose(0, 0, 0, 0), CAM)
        assert p == pytest.approx((2.0, 0.0), abs=1e-12)

    def test_center_rotated(self):
        p = project_to_world(det_at_u(320, 2.0), RobotPose(1, 1, math.pi / 2, 0), CAM)
        assert p == pytest.approx((1.0, 3.0), abs=1e-12)

    def test_left_edge(self):
        p = project_to_world(det_at_u(0, math.sqrt(2)), RobotPose(0, 0, 0, 0), CAM)
        assert p == pytest.approx((1.0, 1.0), abs=1e-12)

    def test_depth_beyond_range(self):
        with pytest.raises(ValueError):
            project_to_world(det_at_u(320, 3.5), RobotPose(0, 0, 0, 0), CAM)

    def test_bbox_for_round_trip(self):
        rng = np.random.default_rng(5)
        for _ in range(500):
            bearing = rng.uniform(-0.99, 0.99) * CAM.horizontal_fov / 2
            depth = rng.uniform(0.2, CAM.max_range_m)
            pose = RobotPose(*rng.uniform(-5, 5, 2), rng.uniform(-math.pi, math.pi), 0)
            bb = bbox_for(bearing, depth, CAM)
            assert 0 <= bb[0] < bb[2] <= CAM.image_width
            det = RawDetection("cup", 0.5, bb, unit([1.0]), depth)
            heading = pose.theta + bearing
            expected = (pose.x + depth * math.cos(heading), pose.y + depth * math.sin(heading))
            assert project_to_world(det, pose, CAM) == pytest.approx(expected, abs=1e-9)

    def test_bbox_outside_fov(self):
        with pytest.raises(ValueError):
            bbox_for(math.pi / 2, 1.0, CAM)

    def test_camera_validation(self):
        with pytest.raises(ValueError):
            CameraModel(horizontal_fov=math.pi)
