import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from miscalib.geometry import (CalibrationSet, DepthMap, ExtrinsicTransform, PointCloud,
                               Projection, euler_to_rotation, project, rasterize, unproject)

P_SIMPLE = np.array([[100.0, 0, 50, 0], [0, 100, 40, 0], [0, 0, 1, 0]])


def simple_calib(size=(100, 80)):
    return CalibrationSet(ExtrinsicTransform.identity(), np.eye(3), P_SIMPLE, size)


def kitti_like_calib():
    rot = euler_to_rotation(0.01, -0.02, 0.015) @ np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0.0]])
    proj = np.array([[718.856, 0, 607.19, 45.38], [0, 718.856, 185.21, -0.1130],
                     [0, 0, 1, 0.0037]])
    rect = euler_to_rotation(0.002, 0.001, -0.003)
    return CalibrationSet(ExtrinsicTransform(rot, [-0.004, -0.076, -0.27]), rect, proj, (1241, 376))


def oracle_elementary(roll, pitch, yaw):
    cr, sr = math.cos(roll), math.sin(roll)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cy, sy = math.cos(yaw), math.sin(yaw)
    rx = [[1, 0, 0], [0, cr, -sr], [0, sr, cr]]
    ry = [[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]]
    rz = [[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]]

    def mul(a, b):
        return [[sum(a[i][k] * b[k][j] for k in range(3)) for j in range(3)] for i in range(3)]
    return np.array(mul(mul(rx, ry), rz))


class TestEuler:
    def test_identity(self):
        assert np.array_equal(euler_to_rotation(0, 0, 0), np.eye(3))

    def test_half_turn_about_x(self):
        np.testing.assert_allclose(euler_to_rotation(math.pi, 0, 0), np.diag([1.0, -1, -1]), atol=1e-15)

    def test_matches_elementary_product(self):
        np.testing.assert_allclose(euler_to_rotation(0.1, 0.2, 0.3),
                                   oracle_elementary(0.1, 0.2, 0.3), atol=1e-12, rtol=0)

    @given(st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi), st.floats(-math.pi, math.pi))
    def test_orthonormal(self, r, p, y):
        m = euler_to_rotation(r, p, y)
        np.testing.assert_allclose(m.T @ m, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(m) - 1) < 1e-12


class TestCalibrationSet:
    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            ExtrinsicTransform(np.diag([1.0, 1, -1]), np.zeros(3))

    def test_rejects_bad_principal_point(self):
        proj = P_SIMPLE.copy()
        proj[0, 2] = 120
        with pytest.raises(ValueError):
            CalibrationSet(ExtrinsicTransform.identity(), np.eye(3), proj, (100, 80))

    def test_rejects_negative_focal(self):
        proj = P_SIMPLE.copy()
        proj[1, 1] = -1
        with pytest.raises(ValueError):
            CalibrationSet(ExtrinsicTransform.identity(), np.eye(3), proj, (100, 80))


class TestProject:
    def test_principal_ray(self):
        pr = project(PointCloud([[0, 0, 10.0]]), simple_calib())
        assert list(pr) == [(50.0, 40.0, 10.0, 0)]

    def test_offset_point(self):
        pr = project(PointCloud([[1, 0, 10.0]]), simple_calib())
        assert (pr.u[0], pr.v[0], pr.depth[0]) == (60.0, 40.0, 10.0)

    def test_behind_camera_culled(self):
        assert len(project(PointCloud([[0, 0, -5.0]]), simple_calib())) == 0

    def test_near_zero_depth_culled(self):
        assert len(project(PointCloud([[0, 0, 1e-7]]), simple_calib())) == 0

    def test_outside_image_culled(self):
        # u = 100 * 10 / 10 + 50 = 150 > width
        assert len(project(PointCloud([[10, 0, 10.0]]), simple_calib())) == 0

    def test_nonfinite_skipped_and_counted(self):
        pr = project(PointCloud([[np.nan, 0, 1], [0, 0, 10.0], [np.inf, 1, 1]]), simple_calib())
        assert pr.n_nonfinite == 2
        assert pr.index.tolist() == [1]

    def test_matches_homogeneous_chain(self):
        calib = kitti_like_calib()
        rng = np.random.default_rng(0)
        pts = np.column_stack([rng.uniform(3, 40, 500), rng.uniform(-10, 10, 500), rng.uniform(-2, 2, 500)])
        pr = project(PointCloud(pts), calib)
        rect4 = np.eye(4)
        rect4[:3, :3] = calib.rect_rotation
        for u, v, d, i in list(pr)[:50]:
            y = calib.projection @ rect4 @ calib.extrinsic.matrix() @ np.append(pts[i], 1.0)
            np.testing.assert_allclose([u, v, d], [y[0] / y[2], y[1] / y[2], y[2]], rtol=1e-12)

    def test_round_trip(self):
        calib = kitti_like_calib()
        rng = np.random.default_rng(1)
        pts = np.column_stack([rng.uniform(3, 70, 2000), rng.uniform(-20, 20, 2000), rng.uniform(-3, 3, 2000)])
        pr = project(PointCloud(pts), calib)
        assert len(pr) > 100
        back = unproject(pr.u, pr.v, pr.depth, calib)
        assert np.abs(back - pts[pr.index]).max() < 1e-6

    def test_rigid_invariance(self):
        calib = kitti_like_calib()
        rng = np.random.default_rng(2)
        pts = np.column_stack([rng.uniform(3, 60, 1000), rng.uniform(-15, 15, 1000), rng.uniform(-3, 3, 1000)])
        q = euler_to_rotation(0.3, -1.1, 2.0)
        moved = calib.replace(extrinsic=ExtrinsicTransform(calib.extrinsic.rotation @ q.T,
                                                           calib.extrinsic.translation))
        a = project(PointCloud(pts), calib)
        b = project(PointCloud(pts @ q.T), moved)
        assert a.index.tolist() == b.index.tolist()
        for x, y in ((a.u, b.u), (a.v, b.v), (a.depth, b.depth)):
            np.testing.assert_allclose(x, y, atol=1e-9, rtol=0)

    def test_pure(self):
        calib = kitti_like_calib()
        pts = np.random.default_rng(3).normal(size=(300, 3)) * 10 + [20, 0, 0]
        a, b = project(PointCloud(pts), calib), project(PointCloud(pts), calib)
        assert a.u.tobytes() == b.u.tobytes() and a.depth.tobytes() == b.depth.tobytes()


class TestRasterize:
    def test_empty(self):
        dm = rasterize(Projection(*(np.zeros(0),) * 3, np.zeros(0, dtype=int)), (8, 6), 80)
        assert dm.values.shape == (6, 8) and not dm.values.any()

    def test_nearest_wins(self):
        pr = Projection(np.array([3.2, 2.9]), np.array([1.0, 1.1]), np.array([10.0, 5.0]), np.array([0, 1]))
        dm = rasterize(pr, (8, 6), 80.0)
        assert dm.values[1, 3] == np.float32(0.0625)
        assert dm.occupied.sum() == 1

    def test_hand_computed_three_points(self):
        calib = simple_calib()
        cloud = PointCloud([[0, 0, 10.0], [1, 0.5, 10.0], [-2, -1, 20.0]])
        # oracle: u = 100 X / Z + 50, v = 100 Y / Z + 40, value = Z / 80
        expected = np.zeros((80, 100), dtype=np.float32)
        expected[40, 50] = 10 / 80
        expected[45, 60] = 10 / 80
        expected[35, 40] = 20 / 80
        dm = rasterize(project(cloud, calib), calib.image_size, 80.0)
        assert np.array_equal(dm.values, expected)

    def test_clamps_far_points(self):
        pr = Projection(np.array([1.0]), np.array([1.0]), np.array([200.0]), np.array([0]))
        assert rasterize(pr, (4, 4), 80.0).values[1, 1] == 1.0

    def test_border_rounding_dropped(self):
        pr = Projection(np.array([7.7]), np.array([1.0]), np.array([5.0]), np.array([0]))
        assert not rasterize(pr, (8, 6), 80.0).values.any()

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        n = 200
        pr = Projection(rng.uniform(0, 10, n), rng.uniform(0, 6, n), rng.uniform(1, 90, n), np.arange(n))
        perm = rng.permutation(n)
        shuffled = Projection(pr.u[perm], pr.v[perm], pr.depth[perm], pr.index[perm])
        a = rasterize(pr, (10, 6), 80.0).values
        b = rasterize(shuffled, (10, 6), 80.0).values
        assert a.tobytes() == b.tobytes()

    def test_depthmap_validates_range(self):
        with pytest.raises(ValueError):
            DepthMap(np.full((2, 2), 1.5))
