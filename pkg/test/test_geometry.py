# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# test/test_geometry.py
import numpy as np
import pytest

from mahalvo.errors import DegenerateGeometryError
from mahalvo.geometry import (CameraIntrinsics, EpipolarLine, InfoMatrix2, Pixel2, PoseSE3, epipolar_line,
                              epipolar_lines, fundamental_from_pose, homogeneous, info_min_eigenvalue,
                              nearest_rotation, point_line_distance, sentinel_info, skew, triangulate_linear)


def test_epipolar_line_canonical():
    F = np.array([[0, 0, 0], [0, 0, -1], [0, 1, 0]], dtype=float)
    line = epipolar_line(F, Pixel2(0, 0))
    assert (line.a, line.b, line.c) == (0.0, -1.0, 0.0)


def test_epipolar_line_zero_matrix_is_degenerate():
    line = epipolar_line(np.zeros((3, 3)), Pixel2(12.0, -3.0))
    assert line.is_degenerate()
    with pytest.raises(DegenerateGeometryError):
        point_line_distance(Pixel2(0, 0), line)


def test_epipolar_lines_match_independent_product():
    rng = np.random.default_rng(4)
    F = rng.standard_normal((3, 3))
    pts = rng.uniform(0, 500, (10, 2))
    batched = epipolar_lines(F, pts)
    for p, row in zip(pts, batched):
        expected = [sum(F[i, j] * (list(p) + [1.0])[j] for j in range(3)) for i in range(3)]
        np.testing.assert_allclose(row, expected, rtol=1e-12)
        np.testing.assert_allclose(epipolar_line(F, Pixel2.from_array(p)).coeffs, expected, rtol=1e-12)


@pytest.mark.parametrize('x, line, expected', [
    ((0, 0), (0, 1, -5), 5.0),
    ((3, 4), (3, 4, 0), 5.0),
    ((2, 5), (0, 1, -5), 0.0),
])
def test_point_line_distance(x, line, expected):
    assert point_line_distance(Pixel2(*x), EpipolarLine(*line)) == pytest.approx(expected)


def test_pixel_must_be_finite():
    with pytest.raises(ValueError):
        Pixel2(float('nan'), 0.0)


def test_info_matrix_properties():
    Y = InfoMatrix2(4.0, 1.0, 2.0)
    assert Y.det == pytest.approx(7.0)
    assert Y.is_positive_definite()
    np.testing.assert_allclose(Y.covariance() @ Y.matrix, np.eye(2), atol=1e-12)
    assert InfoMatrix2.sentinel().is_sentinel()
    with pytest.raises(DegenerateGeometryError):
        InfoMatrix2(1.0, 2.0, 1.0).covariance()


def test_info_min_eigenvalue_closed_form():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((20, 2, 2))
    M = A @ A.transpose(0, 2, 1) + 0.1 * np.eye(2)
    packed = np.stack([M[:, 0, 0], M[:, 0, 1], M[:, 1, 1]], axis=-1)
    np.testing.assert_allclose(info_min_eigenvalue(packed), np.linalg.eigvalsh(M)[:, 0], atol=1e-12)
    assert np.all(info_min_eigenvalue(sentinel_info((3, 4))) == pytest.approx(1e-6))


def test_intrinsics_project_backproject():
    K = CameraIntrinsics(500, 480, 320, 240)
    px = np.array([[10.0, 20.0], [320.0, 240.0], [600.5, 3.25]])
    depth = np.array([2.0, 5.0, 11.0])
    X = K.backproject(px, depth)
    proj, z = K.project(X)
    np.testing.assert_allclose(proj, px, atol=1e-9)
    np.testing.assert_allclose(z, depth)
    with pytest.raises(ValueError):
        CameraIntrinsics(0, 1, 0, 0)


def test_intrinsics_from_matrix_and_scaled():
    K = CameraIntrinsics.from_matrix([[700, 0, 600], [0, 710, 180], [0, 0, 1]])
    assert (K.fx, K.fy, K.cx, K.cy) == (700, 710, 600, 180)
    np.testing.assert_allclose(K.scaled(1 / 3).K[:2], K.K[:2] / 3)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        PoseSE3(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        PoseSE3(1.01 * np.eye(3), np.zeros(3))


def test_pose_compose_inverse_and_associativity():
    rng = np.random.default_rng(1)
    a, b, c = (PoseSE3.from_rotvec(rng.normal(0, 0.5, 3), rng.normal(0, 2, 3)) for _ in range(3))
    assert a.compose(a.inverse()).allclose(PoseSE3.identity(), atol=1e-9)
    assert a.compose(b).compose(c).allclose(a.compose(b.compose(c)), atol=1e-9)
    X = rng.normal(0, 3, (5, 3))
    np.testing.assert_allclose(a.compose(b).apply(X), a.apply(b.apply(X)), atol=1e-9)


def test_pose_from_matrix_snaps_rounded_rotation():
    pose = PoseSE3.from_rotvec([0.1, -0.2, 0.3], [1, 2, 3])
    rounded = np.round(pose.matrix()[:3], 6)
    back = PoseSE3.from_matrix(rounded)
    assert back.angle_to(pose) < 1e-5
    exact = PoseSE3.from_matrix(pose.matrix())
    np.testing.assert_array_equal(exact.R, pose.R)


def test_rotation_angle():
    pose = PoseSE3.from_rotvec([0, 0.25, 0], np.zeros(3))
    assert pose.rotation_angle() == pytest.approx(0.25)
    assert PoseSE3.identity().angle_to(pose) == pytest.approx(0.25)


def test_nearest_rotation_is_rotation():
    M = np.random.default_rng(2).standard_normal((3, 3))
    R = nearest_rotation(M)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    assert np.linalg.det(R) == pytest.approx(1.0)


def test_skew_is_cross_product():
    v, w = np.array([1.0, -2.0, 0.5]), np.array([0.3, 4.0, -1.0])
    np.testing.assert_allclose(skew(v) @ w, np.cross(v, w))


def test_fundamental_from_pose_annihilates_true_matches():
    rng = np.random.default_rng(5)
    K = CameraIntrinsics(500, 500, 320, 240)
    pose = PoseSE3.from_rotvec([0.02, -0.05, 0.01], [0.8, 0.1, 0.2])
    X = np.column_stack([rng.uniform(-3, 3, 30), rng.uniform(-2, 2, 30), rng.uniform(4, 20, 30)])
    x1, _ = K.project(X)
    x2, _ = K.project(pose.apply(X))
    F = fundamental_from_pose(pose, K, K)
    assert np.linalg.norm(F) == pytest.approx(1.0)
    r = np.einsum('ij,jk,ik->i', homogeneous(x2), F, homogeneous(x1))
    assert np.max(np.abs(r)) < 1e-9
    # lines pass through the true matches
    lines = epipolar_lines(F, x1)
    d = np.abs(np.sum(lines * homogeneous(x2), axis=1)) / np.hypot(lines[:, 0], lines[:, 1])
    assert d.max() < 1e-6


def test_triangulate_linear_noiseless():
    rng = np.random.default_rng(6)
    K = CameraIntrinsics(400, 400, 200, 150)
    pose = PoseSE3.from_rotvec([0.0, 0.05, 0.0], [-1.0, 0.0, 0.0])
    X = np.column_stack([rng.uniform(-2, 2, 25), rng.uniform(-1, 1, 25), rng.uniform(3, 15, 25)])
    P1 = K.K @ np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = K.K @ np.hstack([pose.R, pose.t[:, None]])
    x1, _ = K.project(X)
    x2, _ = K.project(pose.apply(X))
    np.testing.assert_allclose(triangulate_linear(P1, P2, x1, x2), X, atol=1e-7)
