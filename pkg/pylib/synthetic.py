# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.synthetic
'''
Synthetic data with planted uncertainty.

Two-view samples draw random scene points and a random relative pose; second-image locations
are perturbed by a planted 2x2 covariance whose inverse becomes the match information.

Sequences drive a camera through a box-shaped street: a ground plane at y = ground_y (y points
down, world frame = first camera) with textured walls on four sides. Scene points lie on those
surfaces, so tracks and rendered frames describe the same geometry and the interior is free of
occlusions.
'''
import dataclasses

import numpy as np
from scipy.spatial.transform import Rotation
import structlog

from mahalvo.epipolar import FundamentalMatrix, MatchSet
from mahalvo.geometry import SENTINEL_EPS, CameraIntrinsics, PoseSE3, fundamental_from_pose

logger = structlog.get_logger(__name__)

PROFILES = ('ground', 'aerial', 'loop')
NEAR_CLIP = 0.5
FAR_CLIP = 30.0
SKY_VALUE = 0.55


@dataclasses.dataclass
class NoiseModel:
    '''
    Per-match Gaussian location noise in pixels. sigma_minor None means isotropic; axis_angle
    None draws a fresh major-axis direction per match.
    '''
    sigma_major: float = 1.0
    sigma_minor: float | None = None
    axis_angle: float | None = None
    outlier_fraction: float = 0.0

    def __post_init__(self):
        if not self.sigma_major > 0 or (self.sigma_minor is not None and not self.sigma_minor > 0):
            raise ValueError('Noise standard deviations must be positive')
        if not 0.0 <= self.outlier_fraction < 1.0:
            raise ValueError(f'Outlier fraction must lie in [0, 1), got {self.outlier_fraction}')

    def covariances(self, rng: np.random.Generator, n: int) -> np.ndarray:
        minor = self.sigma_major if self.sigma_minor is None else self.sigma_minor
        theta = rng.uniform(0, np.pi, n) if self.axis_angle is None else np.full(n, self.axis_angle)
        c, s = np.cos(theta), np.sin(theta)
        rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
        diag = np.diag([self.sigma_major ** 2, minor ** 2])
        return rot @ diag @ rot.transpose(0, 2, 1)


def _pack_info(cov: np.ndarray) -> np.ndarray:
    Y = np.linalg.inv(cov)
    return np.stack([Y[:, 0, 0], 0.5 * (Y[:, 0, 1] + Y[:, 1, 0]), Y[:, 1, 1]], axis=-1)


def _sample_noise(rng: np.random.Generator, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    return np.einsum('nij,nj->ni', L, rng.standard_normal((len(cov), 2)))


@dataclasses.dataclass
class TwoViewConfig:
    n_points: int = 100
    width: int = 640
    height: int = 480
    focal: float = 500.0
    depth_min: float = 4.0
    depth_max: float = 20.0
    baseline: float = 1.0
    max_rotation: float = 0.2  # rad
    noise: NoiseModel = dataclasses.field(default_factory=NoiseModel)
    perturb: bool = True  # False keeps locations exact while info still follows the noise model

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)


@dataclasses.dataclass(eq=False)
class TwoViewSample:
    matches: MatchSet
    x_prime_true: np.ndarray
    F_true: FundamentalMatrix
    pose: PoseSE3  # camera-1 points into camera 2
    intrinsics: CameraIntrinsics
    points: np.ndarray
    is_inlier: np.ndarray
    covariances: np.ndarray


def generate_two_view(cfg: TwoViewConfig | None = None, seed: int = 0) -> TwoViewSample:
    '''Random two-view configuration with matches perturbed in the second image only'''
    cfg = cfg or TwoViewConfig()
    rng = np.random.default_rng(seed)
    K = cfg.intrinsics
    axis = rng.standard_normal(3)
    rotvec = axis / np.linalg.norm(axis) * rng.uniform(0, cfg.max_rotation)
    direction = rng.standard_normal(3)
    pose = PoseSE3.from_rotvec(rotvec, direction / np.linalg.norm(direction) * cfg.baseline)
    pts, x1, x2 = [], [], []
    while sum(len(p) for p in pts) < cfg.n_points:
        m = 2 * cfg.n_points
        pix = np.stack([rng.uniform(0, cfg.width, m), rng.uniform(0, cfg.height, m)], axis=1)
        X = K.backproject(pix, rng.uniform(cfg.depth_min, cfg.depth_max, m))
        proj, z2 = K.project(pose.apply(X))
        ok = (z2 > NEAR_CLIP) & (proj[:, 0] >= 0) & (proj[:, 0] < cfg.width) \
            & (proj[:, 1] >= 0) & (proj[:, 1] < cfg.height)
        pts.append(X[ok])
        x1.append(pix[ok])
        x2.append(proj[ok])
    X = np.concatenate(pts)[:cfg.n_points]
    x = np.concatenate(x1)[:cfg.n_points]
    xp_true = np.concatenate(x2)[:cfg.n_points]
    n = len(X)
    cov = cfg.noise.covariances(rng, n)
    xp = xp_true + _sample_noise(rng, cov) if cfg.perturb else xp_true.copy()
    info = _pack_info(cov)
    is_inlier = np.ones(n, dtype=bool)
    n_out = int(round(cfg.noise.outlier_fraction * n))
    if n_out:
        out = rng.choice(n, n_out, replace=False)
        xp[out] = np.stack([rng.uniform(0, cfg.width, n_out), rng.uniform(0, cfg.height, n_out)], axis=1)
        info[out] = [SENTINEL_EPS, 0.0, SENTINEL_EPS]
        is_inlier[out] = False
    F = FundamentalMatrix(fundamental_from_pose(pose, K, K))
    return TwoViewSample(MatchSet(x, xp, info), xp_true, F, pose, K, X, is_inlier, cov)


@dataclasses.dataclass
class TrajectoryConfig:
    '''Sequence generator settings. Distances in metres, angles in radians.'''
    profile: str = 'ground'
    n_frames: int = 60
    width: int = 320
    height: int = 240
    focal: float = 250.0
    camera_height: float = 1.7
    speed: float = 2.0
    yaw_amplitude: float = 0.05
    yaw_period: int = 40
    wall_offset: float = 4.0
    wall_height: float = 8.0
    n_points: int = 4000
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    climb: float = 3.0  # aerial height swing
    hover_start: int | None = None
    hover_length: int = 10
    hover_yaw_rate: float = 0.004
    loop_radius: float = 5.0

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f'Unknown trajectory profile {self.profile!r}; expected one of {PROFILES}')
        if self.n_frames < 2:
            raise ValueError('A sequence needs at least two frames')

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.focal, self.focal, self.width / 2.0, self.height / 2.0)


@dataclasses.dataclass(eq=False)
class Environment:
    '''Ground plane plus four vertical walls bounding x in [x_min, x_max] and z in [z_min, z_max].'''
    ground_y: float
    x_min: float
    x_max: float
    z_min: float
    z_max: float
    wall_height: float
    texture_seed: int

    def surfaces(self):
        '''(axis, value) for the planes x = x_min ... plus the ground'''
        return [(0, self.x_min), (0, self.x_max), (2, self.z_min), (2, self.z_max), (1, self.ground_y)]

    def texture(self, surface: int, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        rng = np.random.default_rng([self.texture_seed, surface])
        freq = rng.uniform(0.4, 3.0, 14)
        ang = rng.uniform(0, np.pi, 14)
        phase = rng.uniform(0, 2 * np.pi, 14)
        amp = 1.0 / freq
        acc = np.zeros(np.broadcast(a, b).shape)
        for f, t, p, w in zip(freq, ang, phase, amp):
            acc += w * np.sin(2 * np.pi * f * (np.cos(t) * a + np.sin(t) * b) + p)
        return np.clip(0.5 + 0.5 * acc / amp.sum() * 2.5, 0.0, 1.0)


@dataclasses.dataclass(eq=False)
class SyntheticScene:
    profile: str
    trajectory: list[PoseSE3]  # camera-to-world
    intrinsics: CameraIntrinsics
    width: int
    height: int
    points: np.ndarray        # (P, 3) world
    observations: np.ndarray  # (F, P, 2), NaN where not visible
    info: np.ndarray          # (F, P, 3)
    outliers: np.ndarray      # (F, P) bool
    environment: Environment
    camera_heights: np.ndarray  # (F,) metres above the ground
    hover_frames: list[int] = dataclasses.field(default_factory=list)
    seed: int = 0

    @property
    def n_frames(self) -> int:
        return len(self.trajectory)

    def relative_translation_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(self.trajectory[k].t - self.trajectory[k - 1].t)
                         for k in range(1, self.n_frames)])


def _yaw(psi: float) -> np.ndarray:
    return Rotation.from_rotvec([0.0, psi, 0.0]).as_matrix()


def _stadium(cfg: TrajectoryConfig) -> tuple[np.ndarray, np.ndarray]:
    r = cfg.loop_radius
    total = (cfg.n_frames - 1) * cfg.speed
    straight = 0.5 * (total - 2 * np.pi * r)
    if straight <= 0:
        raise ValueError('Loop profile too short for its turn radius; add frames or speed')
    pos, yaw = [], []
    for k in range(cfg.n_frames):
        s = k * total / (cfg.n_frames - 1)
        if s < straight:
            pos.append((-r, 0.0, s))
            yaw.append(0.0)
        elif s < straight + np.pi * r:
            phi = (s - straight) / r
            pos.append((-r * np.cos(phi), 0.0, straight + r * np.sin(phi)))
            yaw.append(phi)
        elif s < 2 * straight + np.pi * r:
            pos.append((r, 0.0, straight - (s - straight - np.pi * r)))
            yaw.append(np.pi)
        else:
            phi = (s - 2 * straight - np.pi * r) / r
            pos.append((r * np.cos(phi), 0.0, -r * np.sin(phi)))
            yaw.append(np.pi + phi)
    pos = np.array(pos)
    return pos - pos[0], np.array(yaw)


def _open_path(cfg: TrajectoryConfig) -> tuple[np.ndarray, np.ndarray, list[int]]:
    pos = np.zeros((cfg.n_frames, 3))
    yaw = np.zeros(cfg.n_frames)
    hover = []
    hover_start = cfg.hover_start if cfg.hover_start is not None else cfg.n_frames // 3
    for k in range(1, cfg.n_frames):
        hovering = cfg.profile == 'aerial' and hover_start <= k < hover_start + cfg.hover_length
        if hovering:
            hover.append(k)
            yaw[k] = yaw[k - 1] + cfg.hover_yaw_rate
            pos[k] = pos[k - 1]
            continue
        yaw[k] = yaw[k - 1] + cfg.yaw_amplitude * 2 * np.pi / cfg.yaw_period * np.cos(2 * np.pi * k / cfg.yaw_period)
        step = cfg.speed * np.array([np.sin(yaw[k - 1]), 0.0, np.cos(yaw[k - 1])])
        pos[k] = pos[k - 1] + step
        if cfg.profile == 'aerial':
            # climb and descend; up is -y
            moving = k - len(hover)
            span = max(cfg.n_frames - 1 - cfg.hover_length, 1)
            pos[k, 1] = -0.5 * cfg.climb * (1 - np.cos(2 * np.pi * moving / span))
    return pos, yaw, hover


def generate_trajectory(cfg: TrajectoryConfig | None = None, seed: int = 0) -> SyntheticScene:
    '''Camera path, scene points on the street surfaces and per-frame tracks'''
    cfg = cfg or TrajectoryConfig()
    rng = np.random.default_rng(seed)
    if cfg.profile == 'loop':
        pos, yaw = _stadium(cfg)
        hover = []
    else:
        pos, yaw, hover = _open_path(cfg)
    trajectory = [PoseSE3(_yaw(psi), p) for psi, p in zip(yaw, pos)]
    if cfg.profile == 'loop':
        trajectory[-1] = trajectory[0]
    centre_x = 0.5 * (pos[:, 0].min() + pos[:, 0].max())
    env = Environment(ground_y=cfg.camera_height,
                      x_min=centre_x - cfg.wall_offset - 0.5 * np.ptp(pos[:, 0]),
                      x_max=centre_x + cfg.wall_offset + 0.5 * np.ptp(pos[:, 0]),
                      z_min=pos[:, 2].min() - 15.0,
                      z_max=pos[:, 2].max() + 40.0,
                      wall_height=cfg.wall_height + cfg.climb,
                      texture_seed=seed)
    points = _scatter_points(env, cfg.n_points, rng)
    K = cfg.intrinsics
    F, P = cfg.n_frames, len(points)
    obs = np.full((F, P, 2), np.nan)
    info = np.zeros((F, P, 3))
    outliers = np.zeros((F, P), dtype=bool)
    nominal = cfg.noise_sigma if cfg.noise_sigma > 0 else 1.0
    for k, T in enumerate(trajectory):
        px, z = K.project(T.inverse().apply(points))
        vis = (z > NEAR_CLIP) & (z < FAR_CLIP) & (px[:, 0] >= 0) & (px[:, 0] <= cfg.width - 1) \
            & (px[:, 1] >= 0) & (px[:, 1] <= cfg.height - 1)
        idx = np.flatnonzero(vis)
        seen = px[idx]
        if cfg.noise_sigma > 0:
            seen = seen + rng.normal(0.0, cfg.noise_sigma, seen.shape)
        obs[k, idx] = seen
        info[k, idx] = [1.0 / nominal ** 2, 0.0, 1.0 / nominal ** 2]
        n_out = int(round(cfg.outlier_fraction * len(idx)))
        if n_out:
            bad = rng.choice(idx, n_out, replace=False)
            obs[k, bad] = np.stack([rng.uniform(0, cfg.width - 1, n_out), rng.uniform(0, cfg.height - 1, n_out)], 1)
            info[k, bad] = [SENTINEL_EPS, 0.0, SENTINEL_EPS]
            outliers[k, bad] = True
    heights = cfg.camera_height - pos[:, 1]
    logger.info('Generated synthetic sequence', profile=cfg.profile, frames=F, points=P, seed=seed)
    return SyntheticScene(cfg.profile, trajectory, K, cfg.width, cfg.height, points, obs, info, outliers, env,
                          heights, hover, seed)


def _scatter_points(env: Environment, n: int, rng: np.random.Generator) -> np.ndarray:
    n_ground = n // 2
    ground = np.stack([rng.uniform(env.x_min, env.x_max, n_ground), np.full(n_ground, env.ground_y),
                       rng.uniform(env.z_min, env.z_max, n_ground)], axis=1)
    n_wall = n - n_ground
    which = rng.integers(0, 4, n_wall)
    y = rng.uniform(env.ground_y - env.wall_height, env.ground_y, n_wall)
    along_z = rng.uniform(env.z_min, env.z_max, n_wall)
    along_x = rng.uniform(env.x_min, env.x_max, n_wall)
    walls = np.empty((n_wall, 3))
    walls[:, 1] = y
    walls[:, 0] = np.select([which == 0, which == 1], [env.x_min, env.x_max], along_x)
    walls[:, 2] = np.select([which == 2, which == 3], [env.z_min, env.z_max], along_z)
    return np.concatenate([ground, walls])


def render_frame(scene: SyntheticScene, k: int) -> np.ndarray:
    '''Ray-cast grayscale frame k in [0, 1]; rays that miss every surface see a flat sky'''
    env = scene.environment
    T = scene.trajectory[k]
    vs, us = np.mgrid[0:scene.height, 0:scene.width].astype(float)
    rays = np.stack([us, vs, np.ones_like(us)], axis=-1) @ scene.intrinsics.K_inv.T @ T.R.T
    c = T.t
    best = np.full(us.shape, np.inf)
    image = np.full(us.shape, SKY_VALUE)
    for surface, (axis, value) in enumerate(env.surfaces()):
        d = rays[..., axis]
        with np.errstate(divide='ignore', invalid='ignore'):
            lam = (value - c[axis]) / d
        hit = c + lam[..., None] * rays
        ok = (lam > 0) & np.isfinite(lam) & (lam < best)
        if axis != 1:
            ok &= (hit[..., 1] <= env.ground_y) & (hit[..., 1] >= env.ground_y - env.wall_height)
        if axis == 0:
            ok &= (hit[..., 2] >= env.z_min) & (hit[..., 2] <= env.z_max)
            a, b = hit[..., 2], hit[..., 1]
        elif axis == 2:
            ok &= (hit[..., 0] >= env.x_min) & (hit[..., 0] <= env.x_max)
            a, b = hit[..., 0], hit[..., 1]
        else:
            a, b = hit[..., 0], hit[..., 2]
        if not ok.any():
            continue
        best[ok] = lam[ok]
        image[ok] = env.texture(surface, a[ok], b[ok])
    return image


def mirrored_sequence(scene: SyntheticScene) -> SyntheticScene:
    '''Forward pass followed by the same frames in reverse order (middle frame repeated)'''
    order = list(range(scene.n_frames)) + list(range(scene.n_frames - 1, -1, -1))
    return dataclasses.replace(
        scene,
        trajectory=[scene.trajectory[k] for k in order],
        observations=scene.observations[order],
        info=scene.info[order],
        outliers=scene.outliers[order],
        camera_heights=scene.camera_heights[order],
        hover_frames=[],
    )
