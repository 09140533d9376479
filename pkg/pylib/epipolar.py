# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.epipolar
'''
Fundamental-matrix estimation from correspondences with per-match second-image uncertainty.

The normalized eight-point solver supplies hypotheses; weighted refinement reweights each
algebraic residual so that minimizing the weighted sum minimizes the Mahalanobis distance of
x' to the epipolar line F x. The RANSAC driver draws minimal sets with probability proportional
to how well each match is localized and scores inliers by that same distance.
'''
import dataclasses
from pathlib import Path
from typing import Callable

import numpy as np
import structlog

from mahalvo.errors import DegenerateGeometryError, EstimationError, InsufficientDataError
from mahalvo.geometry import (CameraIntrinsics, EpipolarLine, InfoMatrix2, Pixel2, PoseSE3,
                              epipolar_lines, homogeneous, triangulate_linear)

logger = structlog.get_logger(__name__)

MIN_MATCHES = 8
RANK_TOL = 1e-10
WEIGHTING_SCHEMES = ('mahalanobis', 'sampson', 'none')
SAMPLING_SCHEMES = ('multinomial', 'uniform')


@dataclasses.dataclass(frozen=True)
class Correspondence:
    x: Pixel2
    x_prime: Pixel2
    info: InfoMatrix2


@dataclasses.dataclass(eq=False)
class MatchSet:
    '''Columnar correspondences: x (n, 2), x_prime (n, 2), packed second-image info (n, 3).'''
    x: np.ndarray
    x_prime: np.ndarray
    info: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float).reshape(-1, 2)
        self.x_prime = np.asarray(self.x_prime, dtype=float).reshape(-1, 2)
        self.info = np.asarray(self.info, dtype=float).reshape(-1, 3)
        if not (len(self.x) == len(self.x_prime) == len(self.info)):
            raise ValueError('Correspondence arrays differ in length')

    def __len__(self):
        return len(self.x)

    def __getitem__(self, k: int) -> Correspondence:
        return Correspondence(Pixel2.from_array(self.x[k]), Pixel2.from_array(self.x_prime[k]),
                              InfoMatrix2.from_array(self.info[k]))

    def subset(self, idx) -> 'MatchSet':
        return MatchSet(self.x[idx], self.x_prime[idx], self.info[idx])

    @classmethod
    def from_correspondences(cls, corrs) -> 'MatchSet':
        corrs = list(corrs)
        if not corrs:
            return cls(np.empty((0, 2)), np.empty((0, 2)), np.empty((0, 3)))
        return cls(np.array([[c.x.u, c.x.v] for c in corrs]),
                   np.array([[c.x_prime.u, c.x_prime.v] for c in corrs]),
                   np.array([c.info.as_array() for c in corrs]))


def as_match_set(matches) -> MatchSet:
    return matches if isinstance(matches, MatchSet) else MatchSet.from_correspondences(matches)


@dataclasses.dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    '''3x3 F with x'^T F x = 0, kept at unit Frobenius norm (sign is arbitrary).'''
    F: np.ndarray

    def __post_init__(self):
        F = np.asarray(self.F, dtype=float).reshape(3, 3)
        n = np.linalg.norm(F)
        if not n > 0:
            raise DegenerateGeometryError('Zero fundamental matrix')
        object.__setattr__(self, 'F', F / n)

    @property
    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.F, compute_uv=False)

    def is_rank2(self, tol: float = RANK_TOL) -> bool:
        s = self.singular_values
        return s[2] / s[0] < tol

    def same_as(self, other: 'FundamentalMatrix', atol: float = 1e-8) -> bool:
        return np.allclose(self.F, other.F, atol=atol) or np.allclose(self.F, -other.F, atol=atol)


@dataclasses.dataclass(frozen=True, eq=False)
class EssentialMatrix:
    E: np.ndarray


@dataclasses.dataclass
class RansacConfig:
    max_iters: int = 1000
    inlier_threshold: float = 2.0
    confidence: float = 0.999
    seed: int = 0
    sampling: str = 'multinomial'
    weighting: str = 'mahalanobis'
    refine_iters: int = 5

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f'max_iters must be >= 1, got {self.max_iters}')
        if self.inlier_threshold <= 0:
            raise ValueError(f'inlier_threshold must be positive, got {self.inlier_threshold}')
        if not 0 < self.confidence < 1:
            raise ValueError(f'confidence must lie in (0, 1), got {self.confidence}')
        if self.sampling not in SAMPLING_SCHEMES:
            raise ValueError(f'Unknown sampling scheme {self.sampling!r}')
        if self.weighting not in WEIGHTING_SCHEMES:
            raise ValueError(f'Unknown weighting scheme {self.weighting!r}')
        if self.refine_iters < 1:
            raise ValueError(f'refine_iters must be >= 1, got {self.refine_iters}')


@dataclasses.dataclass(eq=False)
class RefineResult:
    F: FundamentalMatrix
    ok: bool
    iterations: int
    residuals: list[float]


@dataclasses.dataclass(eq=False)
class RansacResult:
    F: FundamentalMatrix | None
    inliers: np.ndarray
    iterations: int
    ok: bool
    cause: str | None = None
    weights: np.ndarray | None = None

    @property
    def n_inliers(self) -> int:
        return int(self.inliers.sum())


def _check_info(Y: InfoMatrix2):
    if not Y.is_positive_definite():
        raise DegenerateGeometryError(f'Information matrix is not positive definite: {Y}')


def mahalanobis_sq(x: Pixel2, mu: Pixel2, Y: InfoMatrix2) -> float:
    '''(x - mu)^T Y (x - mu)'''
    _check_info(Y)
    d = np.array([x.u - mu.u, x.v - mu.v])
    return float(d @ Y.matrix @ d)


def _min_mahalanobis(mu: np.ndarray, info: np.ndarray, lines: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    '''Batched closed-form minimum Mahalanobis distance from mu (n, 2) to lines (n, 3)'''
    a, b, c = lines[:, 0], lines[:, 1], lines[:, 2]
    yxx, yxy, yyy = info[:, 0], info[:, 1], info[:, 2]
    det = yxx * yyy - yxy * yxy
    denom = a * a * yyy + b * b * yxx - 2.0 * a * b * yxy
    ok = (det > 0) & (denom > 0) & ~((a == 0) & (b == 0))
    safe = np.where(ok, denom, 1.0)
    resid = a * mu[:, 0] + b * mu[:, 1] + c
    d = np.abs(resid) * np.sqrt(np.where(ok, det, 1.0) / safe)
    return np.where(ok, d, np.inf), ok


def min_mahalanobis_point_line(mu: Pixel2, Y: InfoMatrix2, line: EpipolarLine) -> float:
    '''
    Smallest Mahalanobis distance from mu to any point of line:
    |a u + b v + c| sqrt(det Y / (a^2 Yyy + b^2 Yxx - 2 a b Yxy)).
    '''
    if line.is_degenerate():
        raise DegenerateGeometryError('Degenerate line (a = b = 0)')
    _check_info(Y)
    d, ok = _min_mahalanobis(np.array([[mu.u, mu.v]]), Y.as_array()[None], line.coeffs[None])
    if not ok[0]:
        raise DegenerateGeometryError('Non-positive denominator in point-line Mahalanobis distance')
    return float(d[0])


def mahalanobis_weights(F: np.ndarray, matches: MatchSet) -> tuple[np.ndarray, np.ndarray]:
    '''
    Per-match weights phi such that phi * |x'^T F x| equals the Mahalanobis point-line distance.
    Returns (phi, ok); matches with a degenerate line get phi = 0 and ok = False.
    '''
    lines = epipolar_lines(F, matches.x)
    a, b = lines[:, 0], lines[:, 1]
    yxx, yxy, yyy = matches.info[:, 0], matches.info[:, 1], matches.info[:, 2]
    det = yxx * yyy - yxy * yxy
    denom = a * a * yyy + b * b * yxx - 2.0 * a * b * yxy
    ok = (det > 0) & (denom > 0)
    phi = np.zeros(len(matches))
    phi[ok] = np.sqrt(det[ok] / denom[ok])
    return phi, ok


def mahalanobis_weight(F: np.ndarray, corr: Correspondence) -> float:
    _check_info(corr.info)
    phi, ok = mahalanobis_weights(F, MatchSet.from_correspondences([corr]))
    if not ok[0]:
        raise DegenerateGeometryError('Epipolar line of the correspondence is degenerate')
    return float(phi[0])


def sampson_weights(F: np.ndarray, matches: MatchSet) -> tuple[np.ndarray, np.ndarray]:
    '''Sampson weights 1 / sqrt((Fx)_1^2 + (Fx)_2^2 + (F^T x')_1^2 + (F^T x')_2^2)'''
    F = np.asarray(F, dtype=float)
    l2 = epipolar_lines(F, matches.x)
    l1 = epipolar_lines(F.T, matches.x_prime)
    denom = l2[:, 0] ** 2 + l2[:, 1] ** 2 + l1[:, 0] ** 2 + l1[:, 1] ** 2
    ok = denom > 0
    phi = np.zeros(len(matches))
    phi[ok] = 1.0 / np.sqrt(denom[ok])
    return phi, ok


def sampson_weight(F: np.ndarray, corr: Correspondence) -> float:
    phi, ok = sampson_weights(F, MatchSet.from_correspondences([corr]))
    if not ok[0]:
        raise DegenerateGeometryError('Zero Sampson denominator')
    return float(phi[0])


def uniform_weights(F: np.ndarray, matches: MatchSet) -> tuple[np.ndarray, np.ndarray]:
    return np.ones(len(matches)), np.ones(len(matches), dtype=bool)


WEIGHT_FUNCTIONS: dict[str, Callable] = {
    'mahalanobis': mahalanobis_weights,
    'sampson': sampson_weights,
    'none': uniform_weights,
}


def hartley_normalization(points: np.ndarray) -> np.ndarray:
    '''Similarity moving the centroid to the origin with mean distance sqrt(2)'''
    centroid = points.mean(axis=0)
    mean_dist = np.linalg.norm(points - centroid, axis=1).mean()
    s = np.sqrt(2.0) / mean_dist if mean_dist > 0 else 1.0
    return np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])


def _design_matrix(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    u1, v1 = x1[:, 0], x1[:, 1]
    u2, v2 = x2[:, 0], x2[:, 1]
    one = np.ones_like(u1)
    return np.stack([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, one], axis=1)


def _normalized_system(matches: MatchSet):
    T1 = hartley_normalization(matches.x)
    T2 = hartley_normalization(matches.x_prime)
    xn = (homogeneous(matches.x) @ T1.T)[:, :2]
    xpn = (homogeneous(matches.x_prime) @ T2.T)[:, :2]
    return _design_matrix(xn, xpn), T1, T2


def _solve_null_vector(A: np.ndarray) -> np.ndarray:
    _, s, Vt = np.linalg.svd(A, full_matrices=True)
    if len(s) < MIN_MATCHES or s[MIN_MATCHES - 1] <= RANK_TOL * s[0]:
        raise DegenerateGeometryError('Design matrix rank below 8 (degenerate configuration)')
    return Vt[-1].reshape(3, 3)


def enforce_rank2(F: np.ndarray) -> np.ndarray:
    U, s, Vt = np.linalg.svd(F)
    F2 = U @ np.diag([s[0], s[1], 0.0]) @ Vt
    return F2 / np.linalg.norm(F2)


def normalized_eight_point(matches) -> FundamentalMatrix:
    '''
    Linear F from >= 8 correspondences in Hartley-normalized coordinates, denormalized to pixels.
    Rank 2 is not enforced here.
    '''
    matches = as_match_set(matches)
    if len(matches) < MIN_MATCHES:
        raise InsufficientDataError(f'Eight-point needs {MIN_MATCHES} matches, got {len(matches)}')
    A, T1, T2 = _normalized_system(matches)
    Fn = _solve_null_vector(A)
    return FundamentalMatrix(T2.T @ Fn @ T1)


def _weighted_residual(F: np.ndarray, matches: MatchSet, phi: np.ndarray) -> float:
    r = np.einsum('ij,jk,ik->i', homogeneous(matches.x_prime), F, homogeneous(matches.x))
    return float(np.sum((phi * r) ** 2))


def weighted_refine(F0, matches, weighting: str | Callable = 'mahalanobis', iters: int = 5,
                    tol: float = 1e-12) -> RefineResult:
    '''
    Iteratively reweighted eight-point. Each pass takes weights phi from the previous F and
    re-solves the phi-scaled design matrix, then denormalizes and rescales to unit norm. Weights
    are computed in pixel coordinates; the Hartley similarity only rescales all of them by a
    common factor. The last iterate is projected to rank 2.
    '''
    if iters < 1:
        raise ValueError(f'Refinement needs at least one iteration, got {iters}')
    matches = as_match_set(matches)
    if len(matches) < MIN_MATCHES:
        raise InsufficientDataError(f'Refinement needs {MIN_MATCHES} matches, got {len(matches)}')
    weight_fn = WEIGHT_FUNCTIONS[weighting] if isinstance(weighting, str) else weighting
    F0 = F0.F if isinstance(F0, FundamentalMatrix) else np.asarray(F0, dtype=float)
    F0 = F0 / np.linalg.norm(F0)
    A, T1, T2 = _normalized_system(matches)
    F = F0
    residuals = []
    it = 0
    for it in range(1, iters + 1):
        phi, ok = weight_fn(F, matches)
        if ok.mean() < 0.5:
            logger.warning('Most correspondences have degenerate weights; keeping the initial F',
                           degenerate=int((~ok).sum()), total=len(matches))
            return RefineResult(FundamentalMatrix(enforce_rank2(F0)), False, it, residuals)
        try:
            Fn = _solve_null_vector(A * phi[:, None])
        except DegenerateGeometryError:
            logger.warning('Weighted system lost rank; keeping the previous F', iteration=it)
            break
        F_new = T2.T @ Fn @ T1
        F_new /= np.linalg.norm(F_new)
        residuals.append(_weighted_residual(F_new, matches, phi))
        F = F_new
        if len(residuals) > 1 and abs(residuals[-2] - residuals[-1]) < tol:
            break
    # rank 2 only once the weights have settled
    return RefineResult(FundamentalMatrix(enforce_rank2(F)), True, it, residuals)


def _epipolar_distances(F: np.ndarray, matches: MatchSet) -> tuple[np.ndarray, np.ndarray]:
    return _min_mahalanobis(matches.x_prime, matches.info, epipolar_lines(F, matches.x))


def sampling_probabilities(matches: MatchSet, sampling: str = 'multinomial') -> np.ndarray:
    '''Draw probabilities proportional to sqrt(det Y), floored so that every match can be drawn'''
    n = len(matches)
    if sampling == 'uniform':
        return np.full(n, 1.0 / n)
    det = matches.info[:, 0] * matches.info[:, 2] - matches.info[:, 1] ** 2
    w = np.sqrt(np.maximum(det, 0.0))
    w = np.maximum(w, 1e-12 * max(w.max(), 1e-300))
    return w / w.sum()


def draw_minimal_set(rng: np.random.Generator, probs: np.ndarray, size: int = MIN_MATCHES) -> np.ndarray:
    '''Successive multinomial draws without replacement'''
    return rng.choice(len(probs), size=size, replace=False, p=probs)


def _required_iterations(inlier_ratio: float, confidence: float, sample_size: int = MIN_MATCHES) -> float:
    good = inlier_ratio ** sample_size
    if good <= 0:
        return np.inf
    if good >= 1:
        return 0
    return np.log(1.0 - confidence) / np.log(1.0 - good)


def ransac_mahalanobis(matches, cfg: RansacConfig | None = None) -> RansacResult:
    '''
    Robust F: multinomial minimal sets, Mahalanobis inlier test, adaptive stopping, then weighted
    refinement on the consensus set. Iteration k draws from its own seeded stream so the outcome
    depends only on (seed, k). Ties keep the earliest hypothesis.
    '''
    cfg = cfg or RansacConfig()
    matches = as_match_set(matches)
    n = len(matches)
    if n < MIN_MATCHES:
        raise InsufficientDataError(f'RANSAC needs {MIN_MATCHES} matches, got {n}')
    probs = sampling_probabilities(matches, cfg.sampling)
    best_inliers = np.zeros(n, dtype=bool)
    best_count = 0
    needed = float(cfg.max_iters)
    it = 0
    while it < min(cfg.max_iters, needed):
        rng = np.random.default_rng([cfg.seed, it])
        sample = draw_minimal_set(rng, probs)
        it += 1
        try:
            F = normalized_eight_point(matches.subset(sample)).F
        except DegenerateGeometryError:
            continue
        d, _ = _epipolar_distances(F, matches)
        inliers = d < cfg.inlier_threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
            needed = _required_iterations(count / n, cfg.confidence)
    if best_count < MIN_MATCHES:
        logger.info('RANSAC found no consensus set', iterations=it, best=best_count)
        return RansacResult(None, best_inliers, it, False, cause='no_consensus')
    inlier_set = matches.subset(best_inliers)
    try:
        F0 = normalized_eight_point(inlier_set)
        refined = weighted_refine(F0, inlier_set, cfg.weighting, cfg.refine_iters)
    except (DegenerateGeometryError, InsufficientDataError) as e:
        logger.info('Consensus set is degenerate', error=str(e))
        return RansacResult(None, best_inliers, it, False, cause='degenerate_consensus')
    phi, _ = WEIGHT_FUNCTIONS[cfg.weighting](refined.F.F, matches)
    logger.debug('RANSAC done', iterations=it, inliers=best_count, total=n)
    return RansacResult(refined.F, best_inliers, it, True, weights=phi)


def iterations_to_clean_sample(is_inlier: np.ndarray, matches, sampling: str = 'multinomial',
                               seed: int = 0, max_draws: int = 100000) -> int:
    '''Number of minimal-set draws until one contains only true inliers'''
    matches = as_match_set(matches)
    probs = sampling_probabilities(matches, sampling)
    for k in range(max_draws):
        sample = draw_minimal_set(np.random.default_rng([seed, k]), probs)
        if is_inlier[sample].all():
            return k + 1
    return max_draws


def essential_from_fundamental(F, K1: CameraIntrinsics, K2: CameraIntrinsics | None = None) -> EssentialMatrix:
    '''E = K2^T F K1 projected to singular values (s, s, 0)'''
    K2 = K2 or K1
    F = F.F if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)
    s = np.linalg.svd(F, compute_uv=False)
    if s[2] > 1e-6 * s[0]:
        raise DegenerateGeometryError(f'F is not rank 2 (singular values {s})')
    E = K2.K.T @ F @ K1.K
    U, s, Vt = np.linalg.svd(E)
    sigma = 0.5 * (s[0] + s[1])
    E = U @ np.diag([sigma, sigma, 0.0]) @ Vt
    return EssentialMatrix(E / np.linalg.norm(E))


def decompose_essential(E, matches, K1: CameraIntrinsics, K2: CameraIntrinsics | None = None) -> PoseSE3:
    '''
    The one of four (R, +-t) decompositions that puts the most triangulated matches in front of
    both cameras. Unit translation. Raises EstimationError when no candidate wins outright.
    '''
    K2 = K2 or K1
    E = E.E if isinstance(E, EssentialMatrix) else np.asarray(E, dtype=float)
    if np.linalg.norm(E) < 1e-12:
        raise DegenerateGeometryError('Zero essential matrix')
    matches = as_match_set(matches)
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    candidates = [(U @ W @ Vt, t), (U @ W @ Vt, -t), (U @ W.T @ Vt, t), (U @ W.T @ Vt, -t)]
    x1 = (homogeneous(matches.x) @ K1.K_inv.T)[:, :2]
    x2 = (homogeneous(matches.x_prime) @ K2.K_inv.T)[:, :2]
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    counts = []
    for R, tc in candidates:
        X = triangulate_linear(P1, np.hstack([R, tc[:, None]]), x1, x2)
        z2 = X @ R[2] + tc[2]
        counts.append(int(np.sum(np.isfinite(X[:, 2]) & (X[:, 2] > 0) & (z2 > 0))))
    order = np.argsort(counts)[::-1]
    best, second = counts[order[0]], counts[order[1]]
    if best == 0:
        raise EstimationError('No decomposition places points in front of both cameras', cause='cheirality')
    if best == second:
        raise EstimationError('Ambiguous essential-matrix decomposition', cause='cheirality_tie')
    R, tc = candidates[order[0]]
    return PoseSE3(R, tc / np.linalg.norm(tc))


def symmetric_epipolar_error(F, matches) -> np.ndarray:
    '''Per-match squared distances d(x', F x)^2 + d(x, F^T x')^2'''
    F = F.F if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)
    matches = as_match_set(matches)
    l2 = epipolar_lines(F, matches.x)
    l1 = epipolar_lines(F.T, matches.x_prime)
    r = np.einsum('ij,ij->i', homogeneous(matches.x_prime), l2)
    return r ** 2 * (1.0 / (l2[:, 0] ** 2 + l2[:, 1] ** 2) + 1.0 / (l1[:, 0] ** 2 + l1[:, 1] ** 2))


def dump_match_diagnostics(path, F, matches, inliers: np.ndarray | None = None,
                           weighting: str = 'mahalanobis') -> Path:
    '''Tab-separated per-match algebraic residual, weight, Mahalanobis distance and inlier flag'''
    path = Path(path)
    F = F.F if isinstance(F, FundamentalMatrix) else np.asarray(F, dtype=float)
    matches = as_match_set(matches)
    phi, _ = WEIGHT_FUNCTIONS[weighting](F, matches)
    resid = np.einsum('ij,jk,ik->i', homogeneous(matches.x_prime), F, homogeneous(matches.x))
    dist, _ = _epipolar_distances(F, matches)
    inliers = np.ones(len(matches), dtype=bool) if inliers is None else inliers
    with path.open('w') as fp:
        fp.write('index\tresidual\tweight\tmahalanobis\tinlier\n')
        for k in range(len(matches)):
            fp.write(f'{k}\t{resid[k]:.9g}\t{phi[k]:.9g}\t{dist[k]:.9g}\t{int(inliers[k])}\n')
    return path
