# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.sources
'''
Correspondence sources for the odometry driver.

A source turns a frame pair into PairMatches: uncertainty-carrying matches keyed so that
structure from the earlier frame can be looked up, plus the displacement statistics the parallax
gate needs and a flow reliability figure. DenseFlowSource works from images; TrackSource from
precomputed point tracks (synthetic sequences).
'''
import dataclasses
from typing import Callable

import numpy as np
from scipy import ndimage
import structlog

from mahalvo.epipolar import MatchSet, RansacConfig, ransac_mahalanobis
from mahalvo.errors import InsufficientDataError
from mahalvo.flow import FlowConfig, FlowField, compute_dense_flow, match_corners, reliability_fraction
from mahalvo.geometry import SENTINEL_EPS, CameraIntrinsics, PoseSE3, info_min_eigenvalue
from mahalvo.reconstruction import DepthMap, PointCloud, propagate_depth

logger = structlog.get_logger(__name__)


@dataclasses.dataclass(eq=False)
class KeyedStructure:
    '''3-D points of one frame, in that frame's camera coordinates, addressed by integer keys.'''
    keys: np.ndarray    # (n,) sorted, unique
    points: np.ndarray  # (n, 3)
    std: np.ndarray     # (n,) depth standard deviation

    def __post_init__(self):
        order = np.argsort(self.keys, kind='stable')
        self.keys = np.asarray(self.keys, dtype=np.int64)[order]
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)[order]
        self.std = np.asarray(self.std, dtype=float)[order]
        if len(np.unique(self.keys)) != len(self.keys):
            raise ValueError('Structure keys must be unique')

    def __len__(self):
        return len(self.keys)

    @classmethod
    def empty(cls) -> 'KeyedStructure':
        return cls(np.empty(0, dtype=np.int64), np.empty((0, 3)), np.empty(0))

    @classmethod
    def from_cloud(cls, keys: np.ndarray, cloud: PointCloud) -> 'KeyedStructure':
        '''Valid cloud points; a repeated key keeps its nearest point'''
        ok = cloud.valid
        keys, pts, std = np.asarray(keys)[ok], cloud.xyz[ok], cloud.depth_std[ok]
        order = np.lexsort((pts[:, 2], keys))
        keys, pts, std = keys[order], pts[order], std[order]
        first = np.ones(len(keys), dtype=bool)
        first[1:] = keys[1:] != keys[:-1]
        return cls(keys[first], pts[first], std[first])

    def lookup(self, keys: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        '''Points (m, 3) and std (m,) for keys, NaN where absent, plus the found mask'''
        keys = np.asarray(keys, dtype=np.int64)
        pts = np.full((len(keys), 3), np.nan)
        std = np.full(len(keys), np.nan)
        if len(self.keys) == 0:
            return pts, std, np.zeros(len(keys), dtype=bool)
        pos_c = np.minimum(np.searchsorted(self.keys, keys), len(self.keys) - 1)
        found = self.keys[pos_c] == keys
        pts[found] = self.points[pos_c[found]]
        std[found] = self.std[pos_c[found]]
        return pts, std, found

    def fuse(self, other: 'KeyedStructure') -> 'KeyedStructure':
        '''Inverse-variance weighted mean of shared points; the union otherwise'''
        pts, std, found = self.lookup(other.keys)
        w_old = 1.0 / np.maximum(std, 1e-12) ** 2
        w_new = 1.0 / np.maximum(other.std, 1e-12) ** 2
        fused_pts = other.points.copy()
        fused_std = other.std.copy()
        fused_pts[found] = (w_old[found, None] * pts[found] + w_new[found, None] * other.points[found]) \
            / (w_old[found] + w_new[found])[:, None]
        fused_std[found] = 1.0 / np.sqrt(w_old[found] + w_new[found])
        keep = ~np.isin(self.keys, other.keys)
        return KeyedStructure(np.concatenate([self.keys[keep], other.keys]),
                              np.concatenate([self.points[keep], fused_pts]),
                              np.concatenate([self.std[keep], fused_std]))


@dataclasses.dataclass(eq=False)
class PairMatches:
    matches: MatchSet
    keys_prev: np.ndarray   # structure keys in the earlier frame
    keys_curr: np.ndarray   # structure keys in the later frame
    corner_disp: np.ndarray
    flow_mag: np.ndarray
    reliability: float
    flow: FlowField | None = None


def bootstrap_fundamental(img1: np.ndarray, img2: np.ndarray, max_corners: int = 500,
                          seed: int = 0) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    '''
    Coarse F from tracked corners under uniform RANSAC with unit information, used to bias the
    dense matcher. Returns (F or None, corners, tracked corners).
    '''
    p0, p1 = match_corners(img1, img2, max_corners)
    if len(p0) < 8:
        return None, p0, p1
    unit = np.tile([1.0, 0.0, 1.0], (len(p0), 1))
    try:
        rr = ransac_mahalanobis(MatchSet(p0, p1, unit), RansacConfig(sampling='uniform', seed=seed,
                                                                    inlier_threshold=1.5))
    except InsufficientDataError:
        return None, p0, p1
    return (rr.F.F if rr.ok else None), p0, p1


class DenseFlowSource:
    '''Matches sampled from epipolar-biased dense flow. Keys are pixel indices v * W + u.'''
    def __init__(self, image: Callable[[int], np.ndarray], n_frames: int, intrinsics: CameraIntrinsics,
                 cfg: FlowConfig | None = None, seed: int = 0):
        self.image = image
        self.n_frames = n_frames
        self.intrinsics = intrinsics
        self.cfg = cfg or FlowConfig()
        self.seed = seed
        self._shape = None

    @property
    def shape(self) -> tuple[int, int]:
        if self._shape is None:
            self._shape = self.image(0).shape[:2]
        return self._shape

    def match(self, i: int, j: int) -> PairMatches:
        img1, img2 = self.image(i), self.image(j)
        F, p0, p1 = bootstrap_fundamental(img1, img2, self.cfg.max_corners, self.seed)
        field = compute_dense_flow(img1, img2, F, self.cfg)
        H, W = field.shape
        stride = max(1, self.cfg.match_stride)
        grid = np.zeros((H, W), dtype=bool)
        grid[stride // 2::stride, stride // 2::stride] = True
        use = grid & field.valid & (info_min_eigenvalue(field.info) > SENTINEL_EPS)
        vs, us = np.nonzero(use)
        x = np.stack([us, vs], axis=1).astype(float)
        xp = x + field.flow[vs, us]
        tu, tv = np.rint(xp[:, 0]).astype(int), np.rint(xp[:, 1]).astype(int)
        inside = (tu >= 0) & (tu < W) & (tv >= 0) & (tv < H)
        x, xp, vs, us, tu, tv = x[inside], xp[inside], vs[inside], us[inside], tu[inside], tv[inside]
        corner_disp = np.linalg.norm(p1 - p0, axis=1) if len(p0) else np.zeros(1)
        flow_mag = field.magnitudes()
        rel = reliability_fraction(field, self.cfg.info_threshold)
        logger.debug('Dense matches', i=i, j=j, matches=len(x), reliability=rel, epipolar=F is not None)
        return PairMatches(MatchSet(x, xp, field.info[vs, us]), vs * W + us, tv * W + tu, corner_disp,
                           flow_mag if flow_mag.size else np.zeros(1), rel, field)

    def compact(self, structure: KeyedStructure) -> KeyedStructure:
        '''Only the pixels on the match grid, which is all a later loop check can look up'''
        H, W = self.shape
        stride = max(1, self.cfg.match_stride)
        v, u = structure.keys // W, structure.keys % W
        on_grid = (v % stride == stride // 2) & (u % stride == stride // 2)
        return KeyedStructure(structure.keys[on_grid], structure.points[on_grid], structure.std[on_grid])

    def propagate(self, structure: KeyedStructure, pose: PoseSE3, std_inflation: float = 1.05) -> KeyedStructure:
        '''Carry frame-k structure into frame k+1 on the pixel grid, filling one-pixel holes'''
        H, W = self.shape
        depth = np.zeros(H * W)
        std = np.zeros(H * W)
        valid = np.zeros(H * W, dtype=bool)
        inb = (structure.keys >= 0) & (structure.keys < H * W) & (structure.points[:, 2] > 0)
        depth[structure.keys[inb]] = structure.points[inb, 2]
        std[structure.keys[inb]] = structure.std[inb]
        valid[structure.keys[inb]] = True
        dm = propagate_depth(DepthMap(depth.reshape(H, W), std.reshape(H, W), valid.reshape(H, W)), pose,
                             self.intrinsics, std_inflation=std_inflation)
        filled = np.where(dm.valid, dm.depth, np.inf)
        near = ndimage.minimum_filter(filled, size=3, mode='nearest')
        holes = ~dm.valid & np.isfinite(near)
        d = np.where(holes, near, dm.depth)
        s = np.where(holes, ndimage.maximum_filter(dm.std, size=3, mode='nearest'), dm.std)
        valid = dm.valid | holes
        vs, us = np.nonzero(valid)
        pts = self.intrinsics.backproject(np.stack([us, vs], axis=1).astype(float), d[vs, us])
        return KeyedStructure(vs * W + us, pts, s[vs, us])


class TrackSource:
    '''
    Matches from point tracks (F, P, 2) with per-observation information (F, P, 3). Keys are
    track ids. Optional images (for similarity checks and diagnostics) come from a callable.
    '''
    def __init__(self, observations: np.ndarray, info: np.ndarray, intrinsics: CameraIntrinsics,
                 info_threshold: float = 0.05, image: Callable[[int], np.ndarray] | None = None):
        if observations.shape[:2] != info.shape[:2]:
            raise ValueError('Track observations and information differ in shape')
        self.observations = observations
        self.info = info
        self.intrinsics = intrinsics
        self.info_threshold = info_threshold
        self.image = image
        self.n_frames = len(observations)

    def match(self, i: int, j: int) -> PairMatches:
        a, b = self.observations[i], self.observations[j]
        seen_i = np.isfinite(a).all(axis=1)
        shared = seen_i & np.isfinite(b).all(axis=1)
        ids = np.flatnonzero(shared)
        x, xp, info = a[ids], b[ids], self.info[j, ids]
        disp = np.linalg.norm(xp - x, axis=1)
        reliable = info_min_eigenvalue(info) > self.info_threshold
        rel = float(reliable.sum()) / max(int(seen_i.sum()), 1)
        return PairMatches(MatchSet(x, xp, info), ids, ids, disp if len(disp) else np.zeros(1),
                           disp if len(disp) else np.zeros(1), rel)

    def compact(self, structure: KeyedStructure) -> KeyedStructure:
        return structure

    def propagate(self, structure: KeyedStructure, pose: PoseSE3, std_inflation: float = 1.05) -> KeyedStructure:
        pts = pose.apply(structure.points) if len(structure) else structure.points
        front = pts[:, 2] > 0
        return KeyedStructure(structure.keys[front], pts[front], structure.std[front] * std_inflation)
