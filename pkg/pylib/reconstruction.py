# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.reconstruction
'''
Structure and scale: triangulation with propagated uncertainty, ground-plane and depth-ratio
scale estimates, PnP, the 8-point/PnP pose fusion gate, the parallax gate and depth
propagation between frames.
'''
import dataclasses
import enum

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation, Slerp
import structlog

from mahalvo.epipolar import MatchSet, as_match_set
from mahalvo.errors import DegenerateGeometryError, InsufficientDataError
from mahalvo.geometry import (CameraIntrinsics, Point3, PoseSE3, homogeneous, info_arrays_to_matrices,
                              nearest_rotation, triangulate_linear)

logger = structlog.get_logger(__name__)

JACOBIAN_STEP = 1e-3  # px
MIN_PNP_POINTS = 6
GATE_SLACK = 1e-9


class ScaleSource(str, enum.Enum):
    GROUND_PLANE = 'ground_plane'
    DEPTH_RATIO = 'depth_ratio'
    FUSED = 'fused'


class MotionBranch(str, enum.Enum):
    FULL = 'FullPipeline'
    PNP_ONLY = 'PnPOnly'


@dataclasses.dataclass(eq=False)
class DepthMap:
    '''Per-sample depth (metres or unit-baseline units), standard deviation and validity.'''
    depth: np.ndarray
    std: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=float)
        self.std = np.asarray(self.std, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not (self.depth.shape == self.std.shape == self.valid.shape):
            raise ValueError('Depth, std and valid arrays must share a shape')
        if (self.valid & ~(self.depth > 0)).any():
            raise ValueError('Valid depth samples must be positive')

    @classmethod
    def empty(cls, shape) -> 'DepthMap':
        return cls(np.zeros(shape), np.zeros(shape), np.zeros(shape, dtype=bool))


@dataclasses.dataclass(frozen=True)
class Plane:
    '''a x + b y + c z + d = 0 with unit (a, b, c).'''
    a: float
    b: float
    c: float
    d: float

    @classmethod
    def from_coeffs(cls, coeffs) -> 'Plane':
        coeffs = np.asarray(coeffs, dtype=float)
        n = np.linalg.norm(coeffs[:3])
        if n == 0:
            raise DegenerateGeometryError('Plane normal is zero')
        coeffs = coeffs / n
        return cls(*map(float, coeffs))

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def distance(self, points: np.ndarray) -> np.ndarray:
        return points @ self.normal + self.d


@dataclasses.dataclass(eq=False)
class PlaneResult:
    plane: Plane | None
    inliers: np.ndarray
    ok: bool
    cause: str | None = None


@dataclasses.dataclass(frozen=True)
class ScaleEstimate:
    s: float
    source: ScaleSource
    quality: float = 1.0
    ok: bool = True
    cause: str | None = None

    @classmethod
    def invalid(cls, source: ScaleSource, cause: str) -> 'ScaleEstimate':
        return cls(float('nan'), source, 0.0, False, cause)


@dataclasses.dataclass(eq=False)
class PointCloud:
    '''Triangulated points in the first camera's frame.'''
    xyz: np.ndarray        # (n, 3)
    info: np.ndarray       # (n, 3, 3)
    depth_std: np.ndarray  # (n,)
    valid: np.ndarray      # (n,)
    pixels: np.ndarray | None = None  # (n, 2) first-image pixels

    def __len__(self):
        return len(self.xyz)

    def to_points(self) -> list[Point3]:
        return [Point3(*map(float, p), info=i) for p, i, ok in zip(self.xyz, self.info, self.valid) if ok]

    def subset(self, idx) -> 'PointCloud':
        return PointCloud(self.xyz[idx], self.info[idx], self.depth_std[idx], self.valid[idx],
                          None if self.pixels is None else self.pixels[idx])


@dataclasses.dataclass(eq=False)
class PnPResult:
    pose: PoseSE3 | None
    inliers: np.ndarray
    ok: bool
    rms: float = float('nan')
    cause: str | None = None


@dataclasses.dataclass(eq=False)
class FusionResult:
    pose: PoseSE3
    fused: bool
    reason: str


def _triangulate_points(pose: PoseSE3, K1: CameraIntrinsics, K2: CameraIntrinsics,
                        x: np.ndarray, xp: np.ndarray) -> np.ndarray:
    P1 = K1.K @ np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = K2.K @ np.hstack([pose.R, pose.t[:, None]])
    return triangulate_linear(P1, P2, x, xp)


def triangulate(pose: PoseSE3, K1: CameraIntrinsics, K2: CameraIntrinsics | None, matches) -> PointCloud:
    '''
    Linear triangulation in the first camera's frame. Each point's covariance is J Y^-1 J^T with
    J the derivative of the point with respect to x' (central differences); its information is
    the pseudo-inverse. Zero baseline, parallel rays and points behind either camera are invalid.
    '''
    K2 = K2 or K1
    matches = as_match_set(matches)
    n = len(matches)
    empty_info = np.zeros((n, 3, 3))
    if np.linalg.norm(pose.t) <= 1e-12:
        logger.debug('Zero baseline; nothing to triangulate', n=n)
        return PointCloud(np.full((n, 3), np.nan), empty_info, np.full(n, np.inf), np.zeros(n, dtype=bool),
                          matches.x.copy())
    X = _triangulate_points(pose, K1, K2, matches.x, matches.x_prime)
    J = np.empty((n, 3, 2))
    for k in range(2):
        step = np.zeros(2)
        step[k] = JACOBIAN_STEP
        Xp = _triangulate_points(pose, K1, K2, matches.x, matches.x_prime + step)
        Xm = _triangulate_points(pose, K1, K2, matches.x, matches.x_prime - step)
        J[:, :, k] = (Xp - Xm) / (2 * JACOBIAN_STEP)
    Y = info_arrays_to_matrices(matches.info)
    det = np.linalg.det(Y)
    cov2 = np.linalg.inv(np.where(det[:, None, None] > 0, Y, np.eye(2)))
    cov3 = np.einsum('nij,njk,nlk->nil', J, cov2, J)
    finite = np.isfinite(X).all(axis=1) & np.isfinite(cov3).all(axis=(1, 2))
    cov3[~finite] = 0.0
    info3 = np.linalg.pinv(cov3, hermitian=True)
    z2 = np.where(finite, X @ pose.R[2] + pose.t[2], -1.0)
    rays1 = homogeneous(matches.x) @ K1.K_inv.T
    rays2 = (homogeneous(matches.x_prime) @ K2.K_inv.T) @ pose.R
    sin_angle = np.linalg.norm(np.cross(rays1, rays2), axis=1) / (
        np.linalg.norm(rays1, axis=1) * np.linalg.norm(rays2, axis=1))
    valid = finite & (X[:, 2] > 0) & (z2 > 0) & (sin_angle > 1e-9) & (det > 0)
    std = np.sqrt(np.maximum(cov3[:, 2, 2], 0.0))
    std[~valid] = np.inf
    return PointCloud(X, info3, std, valid, matches.x.copy())


def fit_ground_plane(cloud: PointCloud, image_width: float | None = None, cx: float | None = None,
                     normal_prior: float = 0.8, inlier_tol: float = 0.02, iters: int = 200,
                     seed: int = 0) -> PlaneResult:
    '''
    RANSAC plane through valid points below the camera (y > 0) inside the central image band
    |u - cx| <= width / 4, then a least-squares refit on the inliers. "Within half the image
    width of the center" is read as the central half of the image. Taken literally, |u - cx| <= width / 2
    would keep every pixel and the band would filter nothing. Hypotheses must have
    |n . (0, 1, 0)| > normal_prior. inlier_tol is relative to the median point height.
    The returned plane has b > 0.
    '''
    pts = cloud.xyz
    use = cloud.valid & np.isfinite(pts).all(axis=1)
    use &= np.where(use, pts[:, 1], 0.0) > 0
    if cloud.pixels is not None and image_width is not None and cx is not None:
        use &= np.abs(cloud.pixels[:, 0] - cx) <= image_width / 4.0
    idx = np.flatnonzero(use)
    inliers = np.zeros(len(pts), dtype=bool)
    if len(idx) < 3:
        return PlaneResult(None, inliers, False, cause='too_few_points')
    P = pts[idx]
    tol = inlier_tol * float(np.median(P[:, 1]))
    rng = np.random.default_rng(seed)
    best = None
    best_count = 0
    n_hyp = 1 if len(idx) == 3 else iters
    for _ in range(n_hyp):
        sample = P[rng.choice(len(P), 3, replace=False)]
        normal = np.cross(sample[1] - sample[0], sample[2] - sample[0])
        norm = np.linalg.norm(normal)
        if norm < 1e-12:
            continue
        normal /= norm
        if abs(normal[1]) <= normal_prior:
            continue
        d = -normal @ sample[0]
        close = np.abs(P @ normal + d) <= tol
        count = int(close.sum())
        if count > best_count:
            best_count, best = count, close
    if best is None or best_count < 3:
        return PlaneResult(None, inliers, False, cause='no_plane')
    Q = P[best]
    centroid = Q.mean(axis=0)
    _, _, Vt = np.linalg.svd(Q - centroid)
    normal = Vt[-1]
    if abs(normal[1]) <= normal_prior:
        return PlaneResult(None, inliers, False, cause='normal_prior')
    if normal[1] < 0:
        normal = -normal
    plane = Plane.from_coeffs(np.append(normal, -normal @ centroid))
    inliers[idx[best]] = True
    return PlaneResult(plane, inliers, True)


def scale_from_height(plane: Plane | None, camera_height: float) -> ScaleEstimate:
    '''s = -b h / d: metric height over the plane's height in unit-baseline coordinates'''
    if plane is None:
        return ScaleEstimate.invalid(ScaleSource.GROUND_PLANE, 'no_plane')
    if plane.d == 0:
        return ScaleEstimate.invalid(ScaleSource.GROUND_PLANE, 'plane_through_camera')
    s = -plane.b * camera_height / plane.d
    if not s > 0:
        return ScaleEstimate.invalid(ScaleSource.GROUND_PLANE, 'non_positive_scale')
    return ScaleEstimate(float(s), ScaleSource.GROUND_PLANE, quality=abs(plane.b))


def update_camera_height(plane: Plane, scale: float) -> float:
    '''Metric camera height over the plane once the scale is known'''
    return float(scale * -plane.d / plane.b)


def scale_from_depth_ratio(prev: DepthMap, curr: DepthMap) -> ScaleEstimate:
    '''Median of prev/curr over samples valid in both; quality is the overlap fraction of curr'''
    if prev.depth.shape != curr.depth.shape:
        raise ValueError(f'Depth maps differ in shape: {prev.depth.shape} vs {curr.depth.shape}')
    both = prev.valid & curr.valid
    n_curr = int(curr.valid.sum())
    if not both.any() or n_curr == 0:
        return ScaleEstimate.invalid(ScaleSource.DEPTH_RATIO, 'no_overlap')
    s = float(np.median(prev.depth[both] / curr.depth[both]))
    return ScaleEstimate(s, ScaleSource.DEPTH_RATIO, quality=float(both.sum()) / n_curr)


def fuse_scales(ground: ScaleEstimate | None, depth: ScaleEstimate | None, mode: str,
                overlap_fraction: float = 1.0, reinit_overlap: float = 0.05) -> ScaleEstimate:
    '''
    ground_vehicle: mean of whichever estimates are valid.
    aerial: the depth ratio while overlap holds; below reinit_overlap the ground plane takes over.
    '''
    g = ground if ground is not None and ground.ok else None
    d = depth if depth is not None and depth.ok else None
    if g is None and d is None:
        return ScaleEstimate.invalid(ScaleSource.FUSED, 'no_scale')
    if mode == 'ground_vehicle':
        if g and d:
            return ScaleEstimate(0.5 * (g.s + d.s), ScaleSource.FUSED, min(g.quality, d.quality))
        return g or d
    if mode == 'aerial':
        if d and overlap_fraction >= reinit_overlap:
            return d
        if g:
            logger.info('Reinitializing scale from the ground plane', overlap=overlap_fraction)
            return g
        return d
    raise ValueError(f'Unknown vehicle mode {mode!r}')


def apply_scale(pose: PoseSE3, s: float, cloud: PointCloud | None = None,
                depth: DepthMap | None = None) -> tuple[PoseSE3, PointCloud | None, DepthMap | None]:
    if not s > 0:
        raise ValueError(f'Scale must be positive, got {s}')
    scaled_pose = pose.with_translation(pose.t * s)
    if cloud is not None:
        cloud = PointCloud(cloud.xyz * s, cloud.info / (s * s), cloud.depth_std * s, cloud.valid.copy(),
                           cloud.pixels)
    if depth is not None:
        depth = DepthMap(depth.depth * s, depth.std * s, depth.valid.copy())
    return scaled_pose, cloud, depth


def _check_spread(points: np.ndarray):
    s = np.linalg.svd(points - points.mean(axis=0), compute_uv=False)
    if s[0] == 0 or s[1] <= 1e-9 * s[0]:
        raise DegenerateGeometryError('PnP points are collinear')


def _pnp_dlt(X: np.ndarray, rays: np.ndarray) -> PoseSE3:
    '''Direct linear transform on normalized image coordinates, rotation snapped by SVD'''
    centroid = X.mean(axis=0)
    scale = np.sqrt(3.0) / max(np.linalg.norm(X - centroid, axis=1).mean(), 1e-12)
    T = np.diag([scale, scale, scale, 1.0])
    T[:3, 3] = -scale * centroid
    Xh = homogeneous(X) @ T.T
    u, v = rays[:, 0], rays[:, 1]
    zero = np.zeros_like(Xh)
    A = np.vstack([np.hstack([Xh, zero, -u[:, None] * Xh]),
                   np.hstack([zero, Xh, -v[:, None] * Xh])])
    _, s, Vt = np.linalg.svd(A)
    P = Vt[-1].reshape(3, 4) @ T
    M = P[:, :3]
    if np.linalg.det(M) < 0:
        P = -P
        M = -M
    U, S, Vt = np.linalg.svd(M)
    R = U @ Vt
    t = P[:, 3] / S.mean()
    return PoseSE3(nearest_rotation(R), t)


def _reprojection_errors(pose: PoseSE3, K: CameraIntrinsics, X: np.ndarray, px: np.ndarray) -> np.ndarray:
    proj, z = K.project(pose.apply(X))
    err = np.linalg.norm(proj - px, axis=1)
    return np.where(z > 0, err, np.inf)


def _refine_pose(pose: PoseSE3, K: CameraIntrinsics, X: np.ndarray, px: np.ndarray) -> PoseSE3:
    def residuals(p):
        R = Rotation.from_rotvec(p[:3]).as_matrix()
        h = (X @ R.T + p[3:]) @ K.K.T
        return (h[:, :2] / h[:, 2:3] - px).ravel()
    x0 = np.concatenate([Rotation.from_matrix(pose.R).as_rotvec(), pose.t])
    sol = least_squares(residuals, x0, method='lm', xtol=1e-15, ftol=1e-15, gtol=1e-15)
    return PoseSE3.from_rotvec(sol.x[:3], sol.x[3:])


def pnp_pose(points3d: np.ndarray, pixels: np.ndarray, K: CameraIntrinsics, threshold: float = 2.0,
             iters: int = 200, seed: int = 0) -> PnPResult:
    '''
    Metric pose of the current camera from 3-D points in the previous frame and their pixels in
    the current image: six-point DLT hypotheses under RANSAC, DLT refit on the inliers and
    Levenberg-Marquardt on reprojection error.
    '''
    X = np.asarray(points3d, dtype=float).reshape(-1, 3)
    px = np.asarray(pixels, dtype=float).reshape(-1, 2)
    keep = np.isfinite(X).all(axis=1) & np.isfinite(px).all(axis=1) & (X[:, 2] > 0)
    X, px = X[keep], px[keep]
    n = len(X)
    if n < MIN_PNP_POINTS:
        raise InsufficientDataError(f'PnP needs {MIN_PNP_POINTS} points, got {n}')
    _check_spread(X)
    rays = (homogeneous(px) @ K.K_inv.T)[:, :2]
    best_inliers = None
    best_count = 0
    n_hyp = 1 if n == MIN_PNP_POINTS else iters
    for k in range(n_hyp):
        rng = np.random.default_rng([seed, k])
        sample = rng.choice(n, MIN_PNP_POINTS, replace=False)
        try:
            pose = _pnp_dlt(X[sample], rays[sample])
        except (ValueError, np.linalg.LinAlgError):
            continue
        inliers = _reprojection_errors(pose, K, X, px) < threshold
        count = int(inliers.sum())
        if count > best_count:
            best_count, best_inliers = count, inliers
            if count == n:
                break
    if best_inliers is None or best_count < MIN_PNP_POINTS:
        return PnPResult(None, np.zeros(len(keep), dtype=bool), False, cause='no_consensus')
    pose = _pnp_dlt(X[best_inliers], rays[best_inliers])
    pose = _refine_pose(pose, K, X[best_inliers], px[best_inliers])
    err = _reprojection_errors(pose, K, X, px)
    inliers = err < threshold
    rms = float(np.sqrt(np.mean(err[inliers] ** 2))) if inliers.any() else float('inf')
    full = np.zeros(len(keep), dtype=bool)
    full[np.flatnonzero(keep)[inliers]] = True
    return PnPResult(pose, full, True, rms)


def fuse_poses(pose_8pt: PoseSE3, pose_pnp: PoseSE3, scale_ref: float, scale_gate: float = 0.30,
               rotation_gate: float = 0.5) -> FusionResult:
    '''
    Average the two poses (mean translation, slerp midpoint rotation) when PnP agrees with the
    scaled eight-point pose; otherwise keep the eight-point pose. Both gates are inclusive.
    '''
    if not scale_ref > 0:
        raise ValueError(f'Reference scale must be positive, got {scale_ref}')
    scale_dev = abs(np.linalg.norm(pose_pnp.t) - scale_ref) / scale_ref
    angle = pose_8pt.angle_to(pose_pnp)
    if scale_dev > scale_gate + GATE_SLACK:
        return FusionResult(pose_8pt, False, 'scale_gate')
    if angle > rotation_gate + GATE_SLACK:
        return FusionResult(pose_8pt, False, 'rotation_gate')
    slerp = Slerp([0.0, 1.0], Rotation.from_matrix(np.stack([pose_8pt.R, pose_pnp.R])))
    R = slerp([0.5]).as_matrix()[0]
    return FusionResult(PoseSE3(R, 0.5 * (pose_8pt.t + pose_pnp.t)), True, 'fused')


def parallax_gate(corner_disp, flow_mags, median_gate: float = 2.5, q3_gate: float = 5.0) -> MotionBranch:
    '''Full pipeline iff median corner displacement >= median_gate and flow P75 > q3_gate'''
    corner_disp = np.asarray(corner_disp, dtype=float).ravel()
    if hasattr(flow_mags, 'magnitudes'):
        flow_mags = flow_mags.magnitudes()
    flow_mags = np.asarray(flow_mags, dtype=float).ravel()
    if corner_disp.size == 0 or flow_mags.size == 0:
        raise ValueError('Parallax gate needs at least one corner and one flow sample')
    if np.median(corner_disp) >= median_gate and np.percentile(flow_mags, 75) > q3_gate:
        return MotionBranch.FULL
    return MotionBranch.PNP_ONLY


def propagate_depth(depth: DepthMap, pose: PoseSE3, K: CameraIntrinsics, valid_mask: np.ndarray | None = None,
                    std_inflation: float = 1.05) -> DepthMap:
    '''
    Carry a per-pixel depth map into the next frame: back-project, move by pose, re-project to the
    nearest pixel. Collisions keep the nearest surface; pixels leaving the image are dropped.
    '''
    H, W = depth.depth.shape
    use = depth.valid if valid_mask is None else depth.valid & valid_mask
    vs, us = np.nonzero(use)
    out = DepthMap.empty((H, W))
    if len(us) == 0:
        return out
    pix = np.stack([us, vs], axis=1).astype(float)
    X = pose.apply(K.backproject(pix, depth.depth[vs, us]))
    proj, z = K.project(X)
    tu, tv = np.rint(proj[:, 0]), np.rint(proj[:, 1])
    ok = (z > 0) & (tu >= 0) & (tu < W) & (tv >= 0) & (tv < H)
    flat = (tv[ok] * W + tu[ok]).astype(int)
    z = z[ok]
    std = depth.std[vs, us][ok] * std_inflation
    nearest = np.full(H * W, np.inf)
    np.minimum.at(nearest, flat, z)
    winner = z == nearest[flat]
    d = np.zeros(H * W)
    s = np.zeros(H * W)
    d[flat[winner]] = z[winner]
    s[flat[winner]] = std[winner]
    v = np.zeros(H * W, dtype=bool)
    v[flat[winner]] = True
    return DepthMap(d.reshape(H, W), s.reshape(H, W), v.reshape(H, W))


def fuse_depth(prior: DepthMap, new: DepthMap) -> DepthMap:
    '''Inverse-variance weighted mean where both maps are valid, otherwise whichever is'''
    both = prior.valid & new.valid
    w1 = 1.0 / np.maximum(prior.std, 1e-12) ** 2
    w2 = 1.0 / np.maximum(new.std, 1e-12) ** 2
    depth = np.where(new.valid, new.depth, prior.depth)
    std = np.where(new.valid, new.std, prior.std)
    depth = np.where(both, (w1 * prior.depth + w2 * new.depth) / (w1 + w2), depth)
    std = np.where(both, 1.0 / np.sqrt(w1 + w2), std)
    valid = prior.valid | new.valid
    return DepthMap(np.where(valid, depth, 0.0), np.where(valid, std, 0.0), valid)
