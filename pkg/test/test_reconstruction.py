# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# test/test_reconstruction.py
import numpy as np
import pytest

from mahalvo.epipolar import MatchSet
from mahalvo.errors import DegenerateGeometryError, InsufficientDataError
from mahalvo.flow import FlowField
from mahalvo.geometry import CameraIntrinsics, PoseSE3
from mahalvo.reconstruction import (DepthMap, MotionBranch, Plane, PointCloud, ScaleEstimate, ScaleSource,
                                    apply_scale, fit_ground_plane, fuse_depth, fuse_poses, fuse_scales,
                                    parallax_gate, pnp_pose, propagate_depth, scale_from_depth_ratio,
                                    scale_from_height, triangulate, update_camera_height)

K = CameraIntrinsics(500.0, 500.0, 320.0, 240.0)


def scene_points(n=50, seed=0):
    rng = np.random.default_rng(seed)
    return np.column_stack([rng.uniform(-4, 4, n), rng.uniform(-3, 3, n), rng.uniform(4, 20, n)])


def cloud_of(xyz):
    n = len(xyz)
    return PointCloud(np.asarray(xyz, dtype=float), np.tile(np.eye(3), (n, 1, 1)), np.ones(n),
                      np.ones(n, dtype=bool))


def stereo_matches(X, pose, info=(1.0, 0.0, 1.0)):
    x, _ = K.project(X)
    xp, _ = K.project(pose.apply(X))
    return MatchSet(x, xp, np.tile(info, (len(X), 1)))


# Second camera one unit to the right of the first
SIDESTEP = PoseSE3(np.eye(3), [-1.0, 0.0, 0.0])


def test_triangulate_noiseless():
    X = scene_points()
    pose = PoseSE3.from_rotvec([0.02, -0.05, 0.01], [-0.8, 0.1, -0.3])
    cloud = triangulate(pose, K, None, stereo_matches(X, pose))
    assert cloud.valid.all()
    np.testing.assert_allclose(cloud.xyz, X, atol=1e-6)
    assert np.all(np.isfinite(cloud.depth_std))
    assert len(cloud.to_points()) == len(X)


def test_triangulate_zero_baseline_invalid():
    X = scene_points(10)
    pose = PoseSE3.from_rotvec([0.0, 0.1, 0.0], [0.0, 0.0, 0.0])
    cloud = triangulate(pose, K, K, stereo_matches(X, pose))
    assert not cloud.valid.any()


def test_depth_std_grows_with_epipolar_sigma():
    X = scene_points(20)
    stds = []
    for sigma in (0.5, 1.0, 2.0, 4.0):
        cloud = triangulate(SIDESTEP, K, K, stereo_matches(X, SIDESTEP, (1.0 / sigma**2, 0.0, 1.0)))
        assert cloud.valid.all()
        stds.append(cloud.depth_std)
    for lo, hi in zip(stds, stds[1:]):
        assert np.all(hi > lo)


def ground_with_outliers(seed=0, n=100, outlier_fraction=0.2):
    rng = np.random.default_rng(seed)
    n_out = int(n * outlier_fraction)
    ground = np.column_stack([rng.uniform(-5, 5, n - n_out), np.full(n - n_out, 2.0),
                              rng.uniform(3, 30, n - n_out)])
    clutter = np.column_stack([rng.uniform(-5, 5, n_out), rng.uniform(0.2, 1.5, n_out),
                               rng.uniform(3, 30, n_out)])
    return np.vstack([ground, clutter])


def test_fit_ground_plane_planted():
    res = fit_ground_plane(cloud_of(ground_with_outliers()))
    assert res.ok
    np.testing.assert_allclose([res.plane.a, res.plane.b, res.plane.c, res.plane.d], [0, 1, 0, -2], atol=1e-6)
    assert res.inliers[:80].all() and not res.inliers[80:].any()


def test_fit_ground_plane_central_band():
    xyz = ground_with_outliers()
    cloud = cloud_of(xyz)
    cloud.pixels, _ = K.project(xyz)
    res = fit_ground_plane(cloud, image_width=640, cx=320)
    assert res.ok
    assert not res.inliers[np.abs(cloud.pixels[:, 0] - 320) > 160].any()


def test_fit_ground_plane_needs_points_below():
    xyz = ground_with_outliers()
    xyz[:, 1] = -np.abs(xyz[:, 1])
    res = fit_ground_plane(cloud_of(xyz))
    assert not res.ok and res.plane is None
    assert res.cause == 'too_few_points'


def test_fit_ground_plane_three_points():
    res = fit_ground_plane(cloud_of([[0, 1.5, 5], [1, 1.5, 9], [-2, 1.5, 12]]))
    assert res.ok
    np.testing.assert_allclose([res.plane.a, res.plane.b, res.plane.c, res.plane.d], [0, 1, 0, -1.5], atol=1e-12)


def test_fit_ground_plane_rejects_walls():
    rng = np.random.default_rng(1)
    wall = np.column_stack([np.full(50, 3.0), rng.uniform(0.1, 2, 50), rng.uniform(3, 20, 50)])
    assert not fit_ground_plane(cloud_of(wall)).ok


@pytest.mark.parametrize('plane, h, expected', [
    (Plane(0, 1, 0, -2), 1.7, 0.85),
    (Plane(0, 1, 0, -1.7), 1.7, 1.0),
])
def test_scale_from_height(plane, h, expected):
    est = scale_from_height(plane, h)
    assert est.ok and est.source == ScaleSource.GROUND_PLANE
    assert est.s == pytest.approx(expected, rel=1e-12)
    assert update_camera_height(plane, est.s) == pytest.approx(h)


@pytest.mark.parametrize('plane', [Plane(0, 1, 0, 2), Plane(0, 1, 0, 0), None])
def test_scale_from_height_invalid(plane):
    est = scale_from_height(plane, 1.7)
    assert not est.ok and np.isnan(est.s)


def depth_map(values, valid=None):
    values = np.asarray(values, dtype=float)
    valid = values > 0 if valid is None else np.asarray(valid)
    return DepthMap(values, np.full(values.shape, 0.1), valid)


def test_depth_ratio_uniform():
    prev = depth_map(np.full((4, 5), 8.0))
    est = scale_from_depth_ratio(prev, depth_map(np.full((4, 5), 4.0)))
    assert est.ok and est.s == pytest.approx(2.0) and est.quality == pytest.approx(1.0)


def test_depth_ratio_median_robust():
    prev = np.array([2.0] * 6 + [10.0] * 4)
    est = scale_from_depth_ratio(depth_map(prev), depth_map(np.ones(10)))
    assert est.s == pytest.approx(2.0)


def test_depth_ratio_disjoint():
    mask = np.array([True, True, False, False])
    prev = depth_map(np.ones(4), mask)
    curr = depth_map(np.ones(4), ~mask)
    assert not scale_from_depth_ratio(prev, curr).ok
    with pytest.raises(ValueError):
        scale_from_depth_ratio(prev, depth_map(np.ones(5)))


def test_depth_map_rejects_nonpositive_valid():
    with pytest.raises(ValueError):
        DepthMap(np.zeros(3), np.zeros(3), np.ones(3, dtype=bool))


G = ScaleEstimate(0.9, ScaleSource.GROUND_PLANE)
D = ScaleEstimate(1.1, ScaleSource.DEPTH_RATIO)


def test_fuse_scales_ground_mean():
    est = fuse_scales(G, D, 'ground_vehicle')
    assert est.ok and est.s == pytest.approx(1.0)
    assert fuse_scales(G, None, 'ground_vehicle') is G
    assert fuse_scales(ScaleEstimate.invalid(ScaleSource.GROUND_PLANE, 'no_plane'), D, 'ground_vehicle') is D


def test_fuse_scales_aerial():
    d = ScaleEstimate(1.3, ScaleSource.DEPTH_RATIO)
    assert fuse_scales(G, d, 'aerial', overlap_fraction=0.5).s == 1.3
    assert fuse_scales(G, d, 'aerial', overlap_fraction=0.05).s == 1.3
    assert fuse_scales(G, d, 'aerial', overlap_fraction=0.03).s == 0.9
    assert fuse_scales(None, d, 'aerial', overlap_fraction=0.03).s == 1.3


def test_fuse_scales_failure():
    assert not fuse_scales(None, None, 'aerial').ok
    with pytest.raises(ValueError):
        fuse_scales(G, D, 'submarine')


def test_apply_scale():
    pose = PoseSE3.from_rotvec([0.1, 0.0, 0.0], [1.0, 2.0, 3.0])
    cloud = cloud_of(scene_points(5))
    depth = depth_map(np.full((2, 2), 10.0))
    p1, c1, d1 = apply_scale(pose, 1.0, cloud, depth)
    assert p1.allclose(pose) and np.array_equal(c1.xyz, cloud.xyz)
    p2, c2, _ = apply_scale(pose, 2.0, cloud)
    np.testing.assert_allclose(p2.t, [2, 4, 6])
    np.testing.assert_allclose(c2.info[0], np.eye(3) / 4)
    _, _, d_half = apply_scale(pose, 0.5, depth=depth)
    np.testing.assert_allclose(d_half.depth, 5.0)
    scaled, _, _ = apply_scale(pose, 3.7)
    back, _, _ = apply_scale(scaled, 1 / 3.7)
    assert back.allclose(pose, atol=1e-12)
    with pytest.raises(ValueError):
        apply_scale(pose, 0.0)


def test_apply_scale_chain_on_structure():
    cloud = cloud_of(scene_points(5))
    depth = depth_map(np.full((2, 2), 10.0))
    _, c, d = apply_scale(PoseSE3.identity(), 3.7, cloud, depth)
    _, c, d = apply_scale(PoseSE3.identity(), 1 / 3.7, c, d)
    np.testing.assert_allclose(c.xyz, cloud.xyz, atol=1e-12)
    np.testing.assert_allclose(c.info, cloud.info, atol=1e-12)
    np.testing.assert_allclose(d.depth, depth.depth, atol=1e-12)


TRUE_MOTION = PoseSE3.from_rotvec([0.03, -0.08, 0.02], [0.4, -0.1, -1.2])


def test_pnp_noiseless():
    X = scene_points(50)
    px, _ = K.project(TRUE_MOTION.apply(X))
    res = pnp_pose(X, px, K)
    assert res.ok and res.inliers.all()
    assert res.pose.angle_to(TRUE_MOTION) < 1e-6
    np.testing.assert_allclose(res.pose.t, TRUE_MOTION.t, atol=1e-6)
    assert res.rms < 1e-6


def test_pnp_with_gross_outliers():
    X = scene_points(60, seed=3)
    px, _ = K.project(TRUE_MOTION.apply(X))
    rng = np.random.default_rng(3)
    bad = rng.choice(60, 18, replace=False)
    px[bad] += rng.uniform(20, 50, (18, 2)) * rng.choice([-1, 1], (18, 2))
    res = pnp_pose(X, px, K, seed=3)
    assert res.ok
    assert res.pose.angle_to(TRUE_MOTION) < 1e-3
    assert not res.inliers[bad].any()


def test_pnp_agrees_with_relative_pose():
    X = scene_points(40, seed=5)
    px, _ = K.project(TRUE_MOTION.apply(X))
    res = pnp_pose(X, px, K, seed=5)
    cloud = triangulate(TRUE_MOTION, K, K, stereo_matches(X, TRUE_MOTION))
    again = pnp_pose(cloud.xyz, px, K, seed=5)
    assert res.pose.angle_to(again.pose) < 1e-6


def test_pnp_failures():
    X = scene_points(5)
    px, _ = K.project(X)
    with pytest.raises(InsufficientDataError):
        pnp_pose(X, px, K)
    line = np.column_stack([np.linspace(-1, 1, 10), np.zeros(10), np.linspace(5, 9, 10)])
    px, _ = K.project(line)
    with pytest.raises(DegenerateGeometryError):
        pnp_pose(line, px, K)


EIGHT_POINT = PoseSE3(np.eye(3), [1.0, 0.0, 0.0])


def test_fuse_poses_identical():
    res = fuse_poses(EIGHT_POINT, EIGHT_POINT, 1.0)
    assert res.fused and res.pose.allclose(EIGHT_POINT)


def test_fuse_poses_midpoint():
    pnp = PoseSE3.from_rotvec([0.0, 0.2, 0.0], [1.1, 0.0, 0.0])
    res = fuse_poses(EIGHT_POINT, pnp, 1.0)
    assert res.fused and res.reason == 'fused'
    assert res.pose.allclose(PoseSE3.from_rotvec([0.0, 0.1, 0.0], [1.05, 0.0, 0.0]), atol=1e-9)


@pytest.mark.parametrize('pnp, reason', [
    (PoseSE3(np.eye(3), [1.5, 0.0, 0.0]), 'scale_gate'),
    (PoseSE3.from_rotvec([0.6, 0.0, 0.0], [1.0, 0.0, 0.0]), 'rotation_gate'),
])
def test_fuse_poses_gated(pnp, reason):
    res = fuse_poses(EIGHT_POINT, pnp, 1.0)
    assert not res.fused and res.reason == reason
    assert res.pose is EIGHT_POINT


def test_fuse_poses_gate_edges_inclusive():
    assert fuse_poses(EIGHT_POINT, PoseSE3(np.eye(3), [1.3, 0.0, 0.0]), 1.0).fused
    assert fuse_poses(EIGHT_POINT, PoseSE3.from_rotvec([0.0, 0.0, 0.5], [1.0, 0.0, 0.0]), 1.0).fused
    with pytest.raises(ValueError):
        fuse_poses(EIGHT_POINT, EIGHT_POINT, 0.0)


@pytest.mark.parametrize('median, q3, branch', [
    (3.0, 6.0, MotionBranch.FULL),
    (2.0, 6.0, MotionBranch.PNP_ONLY),
    (3.0, 4.0, MotionBranch.PNP_ONLY),
    (2.5, 6.0, MotionBranch.FULL),
    (3.0, 5.0, MotionBranch.PNP_ONLY),
])
def test_parallax_gate(median, q3, branch):
    assert parallax_gate(np.full(7, median), np.full(12, q3)) == branch


def test_parallax_gate_reads_flow_field():
    flow = np.zeros((4, 4, 2))
    flow[..., 0] = 6.0
    assert parallax_gate([3.0], FlowField.means_only(flow)) == MotionBranch.FULL
    with pytest.raises(ValueError):
        parallax_gate([], [1.0])


PROP_K = CameraIntrinsics(50.0, 50.0, 20.0, 20.0)


def plane_depth(z=10.0, shape=(40, 40)):
    return DepthMap(np.full(shape, z), np.full(shape, 0.2), np.ones(shape, dtype=bool))


def test_propagate_identity():
    depth = plane_depth()
    out = propagate_depth(depth, PoseSE3.identity(), PROP_K)
    assert out.valid.all()
    np.testing.assert_allclose(out.depth, depth.depth)
    np.testing.assert_allclose(out.std, 0.2 * 1.05)


def test_propagate_forward_motion():
    out = propagate_depth(plane_depth(), PoseSE3(np.eye(3), [0.0, 0.0, -2.0]), PROP_K)
    assert out.valid.sum() > 100
    np.testing.assert_allclose(out.depth[out.valid], 8.0)


def test_propagate_drops_pixels_leaving_image():
    out = propagate_depth(plane_depth(), PoseSE3(np.eye(3), [2.0, 0.0, 0.0]), PROP_K)
    assert not out.valid[:, :10].any()
    assert out.valid[:, 10:].all()
    np.testing.assert_allclose(out.depth[:, 10:], 10.0)


def test_propagate_keeps_nearest_surface():
    depth = DepthMap(np.array([[10.0, 5.0]]), np.array([[0.1, 0.3]]), np.ones((1, 2), dtype=bool))
    K1 = CameraIntrinsics(10.0, 10.0, 0.0, 0.0)
    # pixel 0 at depth 10 shifts by 1 px; pixel 1 at depth 5 by 2 px and leaves
    out = propagate_depth(depth, PoseSE3(np.eye(3), [1.0, 0.0, 0.0]), K1, std_inflation=1.0)
    np.testing.assert_array_equal(out.valid, [[False, True]])
    assert out.depth[0, 1] == pytest.approx(10.0)
    # pixels 0 and 1 both land on pixel 2
    depth = DepthMap(np.array([[10.0, 20.0, 1.0]]), np.ones((1, 3)), np.array([[True, True, False]]))
    prior = propagate_depth(depth, PoseSE3(np.eye(3), [2.0, 0.0, 0.0]), K1)
    np.testing.assert_array_equal(prior.valid, [[False, False, True]])
    assert prior.depth[0, 2] == pytest.approx(10.0)


def test_fuse_depth():
    prior = DepthMap(np.array([2.0, 3.0, 0.0]), np.array([1.0, 1.0, 0.0]), np.array([True, True, False]))
    new = DepthMap(np.array([4.0, 0.0, 6.0]), np.array([1.0, 0.0, 2.0]), np.array([True, False, True]))
    fused = fuse_depth(prior, new)
    np.testing.assert_allclose(fused.depth, [3.0, 3.0, 6.0])
    np.testing.assert_allclose(fused.std, [1 / np.sqrt(2), 1.0, 2.0])
    assert fused.valid.all()
