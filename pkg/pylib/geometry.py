# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.geometry
'''
Homogeneous-coordinate primitives, the pinhole camera, rigid poses and epipolar-line arithmetic.

Conventions: image origin top-left, u rightward, v downward. Camera frame x right, y down,
z forward. A PoseSE3 maps points of frame a into frame b (X_b = R X_a + t); trajectories hold
camera-to-world poses.
'''
import dataclasses

import numpy as np
from scipy.spatial.transform import Rotation
import structlog

from mahalvo.errors import DegenerateGeometryError

logger = structlog.get_logger(__name__)

ORTHONORMAL_TOL = 1e-9
# Information matrix of an unreliable measurement (effectively infinite variance)
SENTINEL_EPS = 1e-6


@dataclasses.dataclass(frozen=True)
class Pixel2:
    '''Continuous image position in pixels.'''
    u: float
    v: float

    def __post_init__(self):
        if not (np.isfinite(self.u) and np.isfinite(self.v)):
            raise ValueError(f'Pixel coordinates must be finite, got ({self.u}, {self.v})')

    def homogeneous(self) -> np.ndarray:
        return np.array([self.u, self.v, 1.0])

    @classmethod
    def from_array(cls, a) -> 'Pixel2':
        return cls(float(a[0]), float(a[1]))


@dataclasses.dataclass(frozen=True)
class EpipolarLine:
    '''Line a*u + b*v + c = 0 in pixel coordinates.'''
    a: float
    b: float
    c: float

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def is_degenerate(self) -> bool:
        return self.a == 0.0 and self.b == 0.0


@dataclasses.dataclass(frozen=True)
class InfoMatrix2:
    '''
    Symmetric 2x2 inverse covariance of a pixel location, stored as its three free entries.
    Units are 1/px^2.
    '''
    yxx: float
    yxy: float
    yyy: float

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.yxx, self.yxy], [self.yxy, self.yyy]])

    @property
    def det(self) -> float:
        return self.yxx * self.yyy - self.yxy * self.yxy

    def is_positive_definite(self) -> bool:
        return self.yxx > 0 and self.det > 0

    def is_sentinel(self) -> bool:
        return self.yxx <= SENTINEL_EPS and self.yyy <= SENTINEL_EPS and self.yxy == 0.0

    def covariance(self) -> np.ndarray:
        if not self.is_positive_definite():
            raise DegenerateGeometryError(f'Information matrix is not positive definite: {self}')
        return np.linalg.inv(self.matrix)

    def as_array(self) -> np.ndarray:
        return np.array([self.yxx, self.yxy, self.yyy])

    @classmethod
    def from_array(cls, a) -> 'InfoMatrix2':
        return cls(float(a[0]), float(a[1]), float(a[2]))

    @classmethod
    def from_matrix(cls, m) -> 'InfoMatrix2':
        m = np.asarray(m, dtype=float)
        return cls(float(m[0, 0]), float(0.5 * (m[0, 1] + m[1, 0])), float(m[1, 1]))

    @classmethod
    def sentinel(cls) -> 'InfoMatrix2':
        return cls(SENTINEL_EPS, 0.0, SENTINEL_EPS)


def info_arrays_to_matrices(info: np.ndarray) -> np.ndarray:
    '''(..., 3) packed (Yxx, Yxy, Yyy) to (..., 2, 2)'''
    out = np.empty(info.shape[:-1] + (2, 2))
    out[..., 0, 0] = info[..., 0]
    out[..., 0, 1] = info[..., 1]
    out[..., 1, 0] = info[..., 1]
    out[..., 1, 1] = info[..., 2]
    return out


def info_min_eigenvalue(info: np.ndarray) -> np.ndarray:
    '''Smallest eigenvalue of packed 2x2 symmetric matrices, closed form'''
    yxx, yxy, yyy = info[..., 0], info[..., 1], info[..., 2]
    half_trace = 0.5 * (yxx + yyy)
    radius = np.sqrt(0.25 * (yxx - yyy) ** 2 + yxy ** 2)
    return half_trace - radius


def sentinel_info(shape) -> np.ndarray:
    info = np.zeros(tuple(shape) + (3,))
    info[..., 0] = SENTINEL_EPS
    info[..., 2] = SENTINEL_EPS
    return info


@dataclasses.dataclass(frozen=True)
class CameraIntrinsics:
    '''Pinhole intrinsics; focal lengths and principal point in pixels.'''
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f'Focal lengths must be positive, got fx={self.fx} fy={self.fy}')

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, self.skew, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.linalg.inv(self.K)

    @classmethod
    def from_matrix(cls, K) -> 'CameraIntrinsics':
        K = np.asarray(K, dtype=float)
        return cls(fx=K[0, 0], fy=K[1, 1], cx=K[0, 2], cy=K[1, 2], skew=K[0, 1])

    def scaled(self, factor: float) -> 'CameraIntrinsics':
        '''Intrinsics of the same camera after resizing the image by factor'''
        return CameraIntrinsics(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                                self.skew * factor)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        '''Project camera-frame points (n, 3); returns pixels (n, 2) and depths (n,)'''
        points = np.atleast_2d(points)
        z = points[:, 2]
        with np.errstate(divide='ignore', invalid='ignore'):
            h = points @ self.K.T
            px = h[:, :2] / h[:, 2:3]
        return px, z

    def backproject(self, pixels: np.ndarray, depth: np.ndarray) -> np.ndarray:
        '''Camera-frame points for pixels (n, 2) at depths (n,)'''
        rays = homogeneous(pixels) @ self.K_inv.T
        return rays * (np.asarray(depth)[:, None] / rays[:, 2:3])


@dataclasses.dataclass(frozen=True, eq=False)
class PoseSE3:
    '''Rigid transform X_b = R X_a + t.'''
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMAL_TOL) \
                or abs(np.linalg.det(R) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError('Rotation block is not orthonormal with det +1')
        object.__setattr__(self, 'R', R)
        object.__setattr__(self, 't', t)

    @classmethod
    def identity(cls) -> 'PoseSE3':
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T, project: bool = True) -> 'PoseSE3':
        '''
        Build from a 3x4 or 4x4 matrix. Text files carry rotations with a few significant digits,
        so with project set a rotation block that misses orthonormality is snapped to the nearest
        rotation. Already-orthonormal blocks pass through untouched.
        '''
        T = np.asarray(T, dtype=float)
        R, t = T[:3, :3], T[:3, 3]
        ortho = np.allclose(R.T @ R, np.eye(3), atol=ORTHONORMAL_TOL) \
            and abs(np.linalg.det(R) - 1.0) <= ORTHONORMAL_TOL
        if not ortho and project:
            R = nearest_rotation(R)
        return cls(R, t)

    @classmethod
    def from_rotvec(cls, rotvec, t) -> 'PoseSE3':
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), t)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def compose(self, other: 'PoseSE3') -> 'PoseSE3':
        '''self after other: X -> self(other(X))'''
        return PoseSE3(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self) -> 'PoseSE3':
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.atleast_2d(points) @ self.R.T + self.t

    def rotation_angle(self) -> float:
        return float(np.linalg.norm(Rotation.from_matrix(self.R).as_rotvec()))

    def angle_to(self, other: 'PoseSE3') -> float:
        '''Geodesic rotation distance in radians'''
        return float(np.linalg.norm(Rotation.from_matrix(self.R.T @ other.R).as_rotvec()))

    def with_translation(self, t) -> 'PoseSE3':
        return PoseSE3(self.R, t)

    def allclose(self, other: 'PoseSE3', atol: float = 1e-9) -> bool:
        return np.allclose(self.R, other.R, atol=atol) and np.allclose(self.t, other.t, atol=atol)


@dataclasses.dataclass
class Point3:
    '''Triangulated point with optional 3x3 information matrix.'''
    x: float
    y: float
    z: float
    info: np.ndarray | None = None

    @property
    def xyz(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])


def nearest_rotation(M: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def homogeneous(points: np.ndarray) -> np.ndarray:
    points = np.atleast_2d(np.asarray(points, dtype=float))
    return np.hstack([points, np.ones((points.shape[0], 1))])


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def epipolar_line(F: np.ndarray, x: Pixel2) -> EpipolarLine:
    '''Line F x in the second image. A zero result is returned as-is for the caller to flag.'''
    a, b, c = np.asarray(F, dtype=float) @ x.homogeneous()
    return EpipolarLine(float(a), float(b), float(c))


def epipolar_lines(F: np.ndarray, points: np.ndarray) -> np.ndarray:
    '''Batched F x for points (n, 2); returns (n, 3)'''
    return homogeneous(points) @ np.asarray(F, dtype=float).T


def point_line_distance(x: Pixel2, line: EpipolarLine) -> float:
    if line.is_degenerate():
        raise DegenerateGeometryError('Distance to a degenerate line (a = b = 0)')
    return abs(line.a * x.u + line.b * x.v + line.c) / np.hypot(line.a, line.b)


def fundamental_from_pose(pose: PoseSE3, K1: CameraIntrinsics, K2: CameraIntrinsics) -> np.ndarray:
    '''F with x2^T F x1 = 0 for a pose mapping camera-1 points into camera 2, unit Frobenius norm'''
    E = skew(pose.t) @ pose.R
    F = np.linalg.inv(K2.K).T @ E @ K1.K_inv
    return F / np.linalg.norm(F)


def triangulate_linear(P1: np.ndarray, P2: np.ndarray, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    '''
    Batched DLT triangulation. P1, P2 are 3x4 projection matrices; x1, x2 are (n, 2) pixels.
    Returns (n, 3); points at infinity come back as non-finite rows.
    '''
    x1 = np.atleast_2d(x1)
    x2 = np.atleast_2d(x2)
    A = np.stack([
        x1[:, 0:1] * P1[2] - P1[0],
        x1[:, 1:2] * P1[2] - P1[1],
        x2[:, 0:1] * P2[2] - P2[0],
        x2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    A /= np.linalg.norm(A, axis=2, keepdims=True)
    _, _, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]
    with np.errstate(divide='ignore', invalid='ignore'):
        return Xh[:, :3] / Xh[:, 3:4]
