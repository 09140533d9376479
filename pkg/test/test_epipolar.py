# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# test/test_epipolar.py
import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from mahalvo.epipolar import (Correspondence, FundamentalMatrix, MatchSet, RansacConfig, decompose_essential,
                              dump_match_diagnostics, enforce_rank2, essential_from_fundamental, hartley_normalization,
                              mahalanobis_sq,
                              mahalanobis_weight, mahalanobis_weights, min_mahalanobis_point_line,
                              normalized_eight_point, ransac_mahalanobis, sampling_probabilities, sampson_weight,
                              symmetric_epipolar_error, weighted_refine)
from mahalvo.errors import DegenerateGeometryError, InsufficientDataError
from mahalvo.geometry import (CameraIntrinsics, EpipolarLine, InfoMatrix2, Pixel2, PoseSE3, epipolar_line,
                              epipolar_lines, fundamental_from_pose, homogeneous, skew)
from mahalvo.harness import compare_sampling, compare_weightings
from mahalvo.synthetic import NoiseModel, TwoViewConfig, generate_two_view


def noiseless(n=20, seed=0):
    return generate_two_view(TwoViewConfig(n_points=n, perturb=False), seed)


def algebraic(F, matches):
    return np.einsum('ij,jk,ik->i', homogeneous(matches.x_prime), F, homogeneous(matches.x))


@pytest.mark.parametrize('d, Y, expected', [
    ((0.0, 0.0), (1.0, 0.0, 1.0), 0.0),
    ((1.0, 0.0), (1.0, 0.0, 1.0), 1.0),
    ((2.0, 2.0), (2.0, 0.0, 0.5), 10.0),
])
def test_mahalanobis_sq(d, Y, expected):
    mu = Pixel2(5.0, -1.0)
    x = Pixel2(mu.u + d[0], mu.v + d[1])
    assert mahalanobis_sq(x, mu, InfoMatrix2(*Y)) == pytest.approx(expected)


def test_mahalanobis_sq_rejects_non_pd():
    with pytest.raises(DegenerateGeometryError):
        mahalanobis_sq(Pixel2(1, 1), Pixel2(0, 0), InfoMatrix2(1.0, 2.0, 1.0))


def test_min_mahalanobis_examples():
    Y = InfoMatrix2(4.0, 0.0, 1.0)
    assert min_mahalanobis_point_line(Pixel2(3, 0), Y, EpipolarLine(1, 0, 0)) == pytest.approx(6.0)
    assert min_mahalanobis_point_line(Pixel2(0, 7), Y, EpipolarLine(1, 0, 0)) == 0.0
    # isotropic, unit-normalized line: Euclidean distance
    line = EpipolarLine(0.6, 0.8, -2.0)
    assert min_mahalanobis_point_line(Pixel2(4, 5), InfoMatrix2(1, 0, 1), line) == pytest.approx(abs(2.4 + 4 - 2))
    # sigma^-2 I scales the Euclidean distance by 1/sigma
    assert min_mahalanobis_point_line(Pixel2(4, 5), InfoMatrix2(0.25, 0, 0.25), line) == pytest.approx(4.4 / 2)
    with pytest.raises(DegenerateGeometryError):
        min_mahalanobis_point_line(Pixel2(0, 0), Y, EpipolarLine(0, 0, 1))


def test_min_mahalanobis_against_line_search():
    rng = np.random.default_rng(11)
    for _ in range(50):
        A = rng.standard_normal((2, 2))
        Ym = A @ A.T + 0.2 * np.eye(2)
        Y = InfoMatrix2.from_matrix(Ym)
        a, b, c = rng.standard_normal(3)
        mu = Pixel2(*rng.uniform(-5, 5, 2))
        # parametrize the line as p0 + s * direction
        n = np.array([a, b])
        p0 = -c * n / (n @ n)
        direction = np.array([-b, a]) / np.hypot(a, b)

        def dm2(s):
            e = p0 + s * direction - np.array([mu.u, mu.v])
            return float(e @ Ym @ e)

        best = minimize_scalar(dm2, bounds=(-1e4, 1e4), method='bounded', options={'xatol': 1e-9})
        closed = min_mahalanobis_point_line(mu, Y, EpipolarLine(a, b, c))
        assert closed == pytest.approx(np.sqrt(best.fun), abs=1e-6)


def test_mahalanobis_weight_examples():
    F = np.array([[0, 0, 1], [0, 0, 0], [0, 0, 0]], dtype=float)  # every line is u = 0
    corr = Correspondence(Pixel2(10, 20), Pixel2(3, 0), InfoMatrix2(4.0, 0.0, 1.0))
    assert mahalanobis_weight(F, corr) == pytest.approx(2.0)
    sigma = 2.0
    F2 = np.random.default_rng(3).standard_normal((3, 3))
    corr = Correspondence(Pixel2(10, 20), Pixel2(3, 0), InfoMatrix2(sigma ** -2, 0.0, sigma ** -2))
    line = epipolar_line(F2, corr.x)
    assert mahalanobis_weight(F2, corr) == pytest.approx(1 / sigma / np.hypot(line.a, line.b))
    corr = Correspondence(Pixel2(10, 20), Pixel2(3, 0), InfoMatrix2.sentinel())
    assert mahalanobis_weight(F2, corr) == pytest.approx(1e-3 / np.hypot(line.a, line.b))
    with pytest.raises(DegenerateGeometryError):
        mahalanobis_weight(np.zeros((3, 3)), Correspondence(Pixel2(1, 1), Pixel2(2, 2), InfoMatrix2(1, 0, 1)))


def test_weight_times_residual_is_min_mahalanobis():
    rng = np.random.default_rng(12)
    n = 10_000
    F = rng.standard_normal((3, 3))
    A = rng.standard_normal((n, 2, 2))
    Ym = A @ A.transpose(0, 2, 1) + 0.1 * np.eye(2)
    info = np.stack([Ym[:, 0, 0], Ym[:, 0, 1], Ym[:, 1, 1]], axis=-1)
    matches = MatchSet(rng.uniform(0, 100, (n, 2)), rng.uniform(0, 100, (n, 2)), info)
    phi, ok = mahalanobis_weights(F, matches)
    assert ok.all()
    lhs = phi * np.abs(algebraic(F, matches))
    lines = epipolar_lines(F, matches.x)
    rhs = np.array([min_mahalanobis_point_line(Pixel2.from_array(matches.x_prime[k]), InfoMatrix2.from_array(info[k]),
                                               EpipolarLine(*lines[k])) for k in range(n)])
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9)


def test_sampson_weight_homogeneity_and_oracle():
    rng = np.random.default_rng(13)
    F = rng.standard_normal((3, 3))
    corr = Correspondence(Pixel2(3.0, 4.0), Pixel2(-2.0, 1.5), InfoMatrix2(1, 0, 1))
    phi = sampson_weight(F, corr)
    assert phi > 0
    assert sampson_weight(2 * F, corr) == pytest.approx(phi / 2)
    x, xp = corr.x.homogeneous(), corr.x_prime.homogeneous()
    Fx, Ftxp = F @ x, F.T @ xp
    sampson = abs(xp @ F @ x) / np.sqrt(Fx[0] ** 2 + Fx[1] ** 2 + Ftxp[0] ** 2 + Ftxp[1] ** 2)
    assert phi * abs(xp @ F @ x) == pytest.approx(sampson)


def test_eight_point_noiseless():
    sample = noiseless(20)
    F = normalized_eight_point(sample.matches)
    assert np.max(np.abs(algebraic(F.F, sample.matches))) < 1e-9
    assert F.same_as(sample.F_true, atol=1e-8)


def test_eight_point_minimal_case_unique():
    sample = noiseless(8, seed=3)
    F = normalized_eight_point(sample.matches)
    assert F.same_as(sample.F_true, atol=1e-8)


def test_eight_point_detects_planar_degeneracy():
    rng = np.random.default_rng(14)
    K = CameraIntrinsics(500, 500, 320, 240)
    pose = PoseSE3.from_rotvec([0.02, 0.1, -0.03], [0.7, 0.1, 0.3])
    X = K.backproject(rng.uniform([0, 0], [640, 480], (30, 2)), np.full(30, 10.0))
    x2, _ = K.project(pose.apply(X))
    x1, _ = K.project(X)
    with pytest.raises(DegenerateGeometryError):
        normalized_eight_point(MatchSet(x1, x2, np.tile([1.0, 0.0, 1.0], (30, 1))))


def test_eight_point_needs_eight():
    sample = noiseless(7)
    with pytest.raises(InsufficientDataError):
        normalized_eight_point(sample.matches)


def test_weighted_refine_noiseless_recovers_truth():
    sample = generate_two_view(TwoViewConfig(n_points=40, perturb=False, noise=NoiseModel(2.0, 0.4)), 5)
    F0 = normalized_eight_point(sample.matches)
    for scheme in ('mahalanobis', 'sampson', 'none'):
        res = weighted_refine(F0, sample.matches, scheme)
        assert res.ok
        assert res.F.same_as(sample.F_true, atol=1e-8)
        assert res.F.is_rank2()
        assert max(res.residuals) < 1e-18


def test_weighted_refine_isotropic_equals_second_image_sampson():
    sample = generate_two_view(TwoViewConfig(n_points=50, noise=NoiseModel(1.5)), 6)
    matches = MatchSet(sample.matches.x, sample.matches.x_prime, np.tile([0.25, 0.0, 0.25], (50, 1)))
    F0 = normalized_eight_point(matches)

    def second_image_sampson(F, m):
        lines = epipolar_lines(F, m.x)
        return 1.0 / np.hypot(lines[:, 0], lines[:, 1]), np.ones(len(m), dtype=bool)

    a = weighted_refine(F0, matches, 'mahalanobis')
    b = weighted_refine(F0, matches, second_image_sampson)
    assert a.F.same_as(b.F, atol=1e-9)


def test_weighted_refine_invariant_to_common_info_scale():
    sample = generate_two_view(TwoViewConfig(n_points=50, noise=NoiseModel(2.0, 0.5)), 7)
    F0 = normalized_eight_point(sample.matches)
    scaled = MatchSet(sample.matches.x, sample.matches.x_prime, 7.5 * sample.matches.info)
    a = weighted_refine(F0, sample.matches, 'mahalanobis')
    b = weighted_refine(F0, scaled, 'mahalanobis')
    assert a.F.same_as(b.F, atol=1e-9)


def reweighted_eight_point(F0, matches, iters):
    '''Plain IRLS: solve, denormalize, rescale; rank 2 only at the end'''
    T1, T2 = hartley_normalization(matches.x), hartley_normalization(matches.x_prime)
    A = np.einsum('ni,nj->nij', homogeneous(matches.x_prime) @ T2.T, homogeneous(matches.x) @ T1.T).reshape(-1, 9)
    F = F0 / np.linalg.norm(F0)
    for _ in range(iters):
        phi, _ = mahalanobis_weights(F, matches)
        F = T2.T @ np.linalg.svd(A * phi[:, None])[2][-1].reshape(3, 3) @ T1
        F /= np.linalg.norm(F)
    return FundamentalMatrix(enforce_rank2(F))


def test_weighted_refine_projects_rank2_after_last_iteration():
    sample = generate_two_view(TwoViewConfig(n_points=60, noise=NoiseModel(2.0, 0.4)), 3)
    F0 = normalized_eight_point(sample.matches)
    res = weighted_refine(F0, sample.matches, 'mahalanobis', iters=5, tol=0.0)
    assert res.iterations == 5
    assert res.F.same_as(reweighted_eight_point(F0.F, sample.matches, 5), atol=1e-9)
    assert res.F.is_rank2()


def test_weighted_refine_aborts_on_degenerate_weights():
    sample = noiseless(20)
    matches = MatchSet(sample.matches.x, sample.matches.x_prime, np.zeros((20, 3)))
    F0 = normalized_eight_point(sample.matches)
    res = weighted_refine(F0, matches, 'mahalanobis')
    assert not res.ok
    assert res.F.same_as(FundamentalMatrix(enforce_rank2(F0.F)))
    with pytest.raises(ValueError):
        weighted_refine(F0, sample.matches, iters=0)


def test_weighting_schemes_order_by_rotation_error_under_anisotropic_noise():
    study = compare_weightings(range(200))
    mahal, sampson, none = (study.median_rotation(s) for s in ('mahalanobis', 'sampson', 'none'))
    assert mahal <= sampson <= none
    assert study.rotation_margin('mahalanobis', 'none') >= 0.10
    assert study.rotation_ordering_holds()
    assert study.median('mahalanobis') < study.median('none')


def test_ransac_outlier_free():
    sample = noiseless(100, seed=8)
    res = ransac_mahalanobis(sample.matches, RansacConfig(seed=1))
    assert res.ok
    assert res.inliers.all()
    assert res.F.same_as(sample.F_true, atol=1e-8)
    assert res.F.is_rank2()


def test_ransac_with_outliers_is_deterministic_and_accurate():
    cfg = TwoViewConfig(n_points=100, noise=NoiseModel(0.5, outlier_fraction=0.3))
    sample = generate_two_view(cfg, 9)
    a = ransac_mahalanobis(sample.matches, RansacConfig(seed=4))
    b = ransac_mahalanobis(sample.matches, RansacConfig(seed=4))
    np.testing.assert_array_equal(a.inliers, b.inliers)
    np.testing.assert_array_equal(a.F.F, b.F.F)
    truth = MatchSet(sample.matches.x[sample.is_inlier], sample.x_prime_true[sample.is_inlier],
                     sample.matches.info[sample.is_inlier])
    assert np.median(symmetric_epipolar_error(a.F, truth)) < 1.0
    assert a.n_inliers >= 60


def test_ransac_needs_eight():
    with pytest.raises(InsufficientDataError):
        ransac_mahalanobis(noiseless(7).matches)


def test_sampling_probabilities_prefer_tight_information():
    info = np.array([[4.0, 0.0, 4.0], [1e-6, 0.0, 1e-6], [1.0, 0.0, 1.0]])
    m = MatchSet(np.zeros((3, 2)), np.zeros((3, 2)), info)
    p = sampling_probabilities(m)
    assert p.sum() == pytest.approx(1.0)
    assert p[0] > p[2] > p[1] > 0
    np.testing.assert_allclose(sampling_probabilities(m, 'uniform'), 1 / 3)


def test_weighted_sampling_needs_fewer_draws():
    study = compare_sampling(range(100))
    assert study.median('multinomial') < study.median('uniform')


def test_essential_identity_intrinsics():
    sample = noiseless(20)
    I = CameraIntrinsics(1.0, 1.0, 0.0, 0.0)
    pose = sample.pose
    F = fundamental_from_pose(pose, I, I)
    E = essential_from_fundamental(F, I).E
    E_true = skew(pose.t) @ pose.R
    E_true /= np.linalg.norm(E_true)
    assert np.allclose(E, E_true, atol=1e-9) or np.allclose(E, -E_true, atol=1e-9)


def test_essential_from_known_pose():
    sample = noiseless(20, seed=2)
    K = sample.intrinsics
    E = essential_from_fundamental(sample.F_true, K).E
    E_true = skew(sample.pose.t) @ sample.pose.R
    E_true /= np.linalg.norm(E_true)
    assert np.allclose(E, E_true, atol=1e-9) or np.allclose(E, -E_true, atol=1e-9)
    s = np.linalg.svd(E, compute_uv=False)
    assert s[0] == pytest.approx(s[1]) and s[2] < 1e-12


def test_essential_rejects_rank3():
    with pytest.raises(DegenerateGeometryError):
        essential_from_fundamental(np.eye(3), CameraIntrinsics(1, 1, 0, 0))


def test_decompose_pure_translation():
    rng = np.random.default_rng(15)
    K = CameraIntrinsics(500, 500, 320, 240)
    t = np.array([1.0, 0.0, 0.2])
    pose = PoseSE3(np.eye(3), t)
    X = K.backproject(rng.uniform([0, 0], [640, 480], (30, 2)), rng.uniform(4, 20, 30))
    x1, _ = K.project(X)
    x2, _ = K.project(pose.apply(X))
    matches = MatchSet(x1, x2, np.tile([1.0, 0.0, 1.0], (30, 1)))
    E = essential_from_fundamental(fundamental_from_pose(pose, K, K), K)
    est = decompose_essential(E, matches, K)
    np.testing.assert_allclose(est.R, np.eye(3), atol=1e-8)
    cosang = np.clip(est.t @ (t / np.linalg.norm(t)), -1, 1)
    assert np.arccos(cosang) < 1e-7
    assert np.linalg.norm(est.t) == pytest.approx(1.0)


def test_decompose_known_pose():
    for seed in range(10):
        sample = noiseless(20, seed=seed)
        K = sample.intrinsics
        E = essential_from_fundamental(normalized_eight_point(sample.matches).F, K)
        est = decompose_essential(E, sample.matches, K)
        assert est.angle_to(sample.pose) < 1e-6
        true_dir = sample.pose.t / np.linalg.norm(sample.pose.t)
        assert np.arccos(np.clip(est.t @ true_dir, -1, 1)) < 1e-6


def test_decompose_zero_essential():
    sample = noiseless(10)
    with pytest.raises(DegenerateGeometryError):
        decompose_essential(np.zeros((3, 3)), sample.matches, sample.intrinsics)


def test_dump_match_diagnostics(tmp_path):
    sample = noiseless(12)
    path = dump_match_diagnostics(tmp_path / 'matches.tsv', sample.F_true, sample.matches)
    lines = path.read_text().splitlines()
    assert lines[0].split('\t') == ['index', 'residual', 'weight', 'mahalanobis', 'inlier']
    assert len(lines) == 13
    assert all(line.endswith('\t1') for line in lines[1:])
