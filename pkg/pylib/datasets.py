# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.datasets
'''
Sequence directories, pose files and trajectory metrics.

Sequence layout (benchmark style):
  <seq>/image_0/000000.png ...   grayscale frames
  <seq>/calib.txt                 'P0: ' followed by a row-major 3x4 projection matrix
  <seq>/poses.txt                 optional ground truth, 12 values per line
  <seq>/tracks/*.npy              optional synthetic tracks (observations, info, outliers, points)

Pose lines hold the first three rows of a 4x4 camera-to-world matrix, row-major, optionally
preceded by an integer frame index.
'''
import dataclasses
import json
from pathlib import Path

import cv2
import numpy as np
import structlog

from mahalvo.errors import SequenceFormatError
from mahalvo.geometry import CameraIntrinsics, PoseSE3

logger = structlog.get_logger(__name__)

DEFAULT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DEFAULT_STEP = 10
TRACK_ARRAYS = ('observations', 'info', 'outliers', 'points')


@dataclasses.dataclass(eq=False)
class Sequence:
    root: Path
    image_paths: list[Path]
    intrinsics: CameraIntrinsics
    ground_truth: list[PoseSE3] | None = None
    tracks: dict[str, np.ndarray] | None = None

    @property
    def n_frames(self) -> int:
        if self.image_paths:
            return len(self.image_paths)
        return 0 if self.tracks is None else len(self.tracks['observations'])

    def image(self, k: int) -> np.ndarray:
        img = cv2.imread(str(self.image_paths[k]), cv2.IMREAD_GRAYSCALE)
        if img is None:
            raise SequenceFormatError('Unreadable image', path=self.image_paths[k])
        return img

    def image_size(self) -> tuple[int, int]:
        '''(width, height)'''
        if self.image_paths:
            h, w = self.image(0).shape[:2]
            return w, h
        return int(round(2 * self.intrinsics.cx)), int(round(2 * self.intrinsics.cy))


@dataclasses.dataclass
class TrajectoryMetrics:
    rotation_error: float     # deg per metre
    translation_error: float  # percent
    n_segments: int
    per_length: dict[int, tuple[float, float]] = dataclasses.field(default_factory=dict)

    def as_dict(self) -> dict:
        return {'rotation_error_deg_per_m': self.rotation_error, 'translation_error_pct': self.translation_error,
                'n_segments': self.n_segments,
                'per_length': {str(k): {'rotation_error_deg_per_m': r, 'translation_error_pct': t}
                               for k, (r, t) in self.per_length.items()}}


@dataclasses.dataclass
class ScaleDriftReport:
    forward_norms: np.ndarray
    reverse_norms: np.ndarray
    scale_difference_pct: np.ndarray  # nan where the forward step is ~0
    flagged: np.ndarray  # forward steps too small to compare


def parse_calibration(path) -> CameraIntrinsics:
    path = Path(path)
    if not path.exists():
        raise SequenceFormatError('Calibration file not found', path=path)
    with path.open() as fp:
        for line_no, line in enumerate(fp, 1):
            if not line.strip():
                continue
            label, _, rest = line.partition(':')
            if rest and label.strip() not in ('P0', 'K'):
                continue
            values = (rest or label).split()
            try:
                nums = np.array(values, dtype=float)
            except ValueError:
                raise SequenceFormatError('Non-numeric calibration entry', path=path, line_no=line_no)
            if nums.size == 12:
                K = nums.reshape(3, 4)[:, :3]
            elif nums.size == 9:
                K = nums.reshape(3, 3)
            else:
                raise SequenceFormatError(f'Expected 9 or 12 calibration values, got {nums.size}', path=path,
                                          line_no=line_no)
            try:
                return CameraIntrinsics.from_matrix(K)
            except ValueError as e:
                raise SequenceFormatError(str(e), path=path, line_no=line_no)
    raise SequenceFormatError('No P0 or K entry in calibration file', path=path)


def write_calibration(path, K: CameraIntrinsics) -> Path:
    path = Path(path)
    P = np.hstack([K.K, np.zeros((3, 1))])
    path.write_text('P0: ' + ' '.join(f'{v:.12e}' for v in P.ravel()) + '\n')
    return path


def read_poses(path, indexed: bool | None = None) -> list[PoseSE3]:
    '''
    Strict pose-file reader. indexed None infers from the first line whether a frame index
    column leads; every line must then have the same field count.
    '''
    path = Path(path)
    if not path.exists():
        raise SequenceFormatError('Pose file not found', path=path)
    poses = []
    with path.open() as fp:
        for line_no, line in enumerate(fp, 1):
            fields = line.split()
            if not fields:
                continue
            if indexed is None:
                indexed = len(fields) == 13
            expected = 13 if indexed else 12
            if len(fields) != expected:
                raise SequenceFormatError(f'Expected {expected} fields, got {len(fields)}', path=path, line_no=line_no)
            try:
                nums = np.array(fields, dtype=float)
            except ValueError:
                raise SequenceFormatError('Non-numeric pose field', path=path, line_no=line_no)
            if indexed and int(nums[0]) != len(poses):
                raise SequenceFormatError(f'Frame index {fields[0]} out of order', path=path, line_no=line_no)
            try:
                poses.append(PoseSE3.from_matrix(nums[-12:].reshape(3, 4)))
            except ValueError as e:
                raise SequenceFormatError(str(e), path=path, line_no=line_no)
    return poses


def write_trajectory(path, poses, indexed: bool = False) -> Path:
    '''Full-precision text so a read-back reproduces the matrices exactly'''
    path = Path(path)
    with path.open('w') as fp:
        for k, pose in enumerate(poses):
            vals = ' '.join(f'{v:.17g}' for v in pose.matrix()[:3].ravel())
            fp.write(f'{k} {vals}\n' if indexed else f'{vals}\n')
    return path


def _load_tracks(root: Path) -> dict[str, np.ndarray] | None:
    tdir = root / 'tracks'
    if not tdir.is_dir():
        return None
    out = {}
    for name in TRACK_ARRAYS:
        f = tdir / f'{name}.npy'
        if not f.exists():
            raise SequenceFormatError(f'Missing track array {name}.npy', path=tdir)
        out[name] = np.load(f, allow_pickle=False)
    return out


def write_tracks(root: Path, observations, info, outliers, points) -> Path:
    tdir = Path(root) / 'tracks'
    tdir.mkdir(parents=True, exist_ok=True)
    for name, arr in zip(TRACK_ARRAYS, (observations, info, outliers, points)):
        np.save(tdir / f'{name}.npy', np.ascontiguousarray(arr), allow_pickle=False)
    return tdir


def load_sequence(path) -> Sequence:
    root = Path(path)
    if not root.is_dir():
        raise SequenceFormatError('Sequence directory not found', path=root)
    K = parse_calibration(root / 'calib.txt')
    image_dir = root / 'image_0'
    images = sorted(image_dir.glob('*.png')) if image_dir.is_dir() else []
    tracks = _load_tracks(root)
    if not images and tracks is None:
        raise SequenceFormatError('No image_0/*.png frames and no tracks', path=root)
    gt = read_poses(root / 'poses.txt') if (root / 'poses.txt').exists() else None
    seq = Sequence(root, images, K, gt, tracks)
    if gt is not None and len(gt) != seq.n_frames:
        raise SequenceFormatError(f'{len(gt)} ground-truth poses for {seq.n_frames} frames', path=root / 'poses.txt')
    logger.info('Loaded sequence', path=str(root), frames=seq.n_frames, ground_truth=gt is not None,
                tracks=tracks is not None)
    return seq


def trajectory_distances(poses) -> np.ndarray:
    centres = np.array([p.t for p in poses])
    steps = np.linalg.norm(np.diff(centres, axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def _last_frame(dist: np.ndarray, first: int, length: float) -> int:
    beyond = np.flatnonzero(dist[first:] > dist[first] + length)
    return int(first + beyond[0]) if len(beyond) else -1


def evaluate_trajectory(estimate, ground_truth, lengths=DEFAULT_LENGTHS, step: int = DEFAULT_STEP) -> TrajectoryMetrics:
    '''
    Segment-based drift: for every step-th start frame and every length, compare the relative
    motion to the first frame past that distance. Returns mean rotation error (deg/m) and mean
    translation error (%); nan when no segment fits.
    '''
    if len(estimate) != len(ground_truth):
        raise ValueError(f'Trajectory lengths differ: {len(estimate)} vs {len(ground_truth)}')
    dist = trajectory_distances(ground_truth)
    errors = []
    for first in range(0, len(ground_truth), step):
        for length in lengths:
            last = _last_frame(dist, first, length)
            if last < 0:
                continue
            delta_gt = ground_truth[first].inverse().compose(ground_truth[last])
            delta_est = estimate[first].inverse().compose(estimate[last])
            err = delta_est.inverse().compose(delta_gt)
            errors.append((length, err.rotation_angle() / length, float(np.linalg.norm(err.t)) / length))
    if not errors:
        logger.warning('No evaluation segment fits the trajectory', frames=len(ground_truth), lengths=list(lengths))
        return TrajectoryMetrics(float('nan'), float('nan'), 0)
    arr = np.array(errors)
    per_length = {}
    for length in lengths:
        sel = arr[:, 0] == length
        if sel.any():
            per_length[int(length)] = (float(np.degrees(arr[sel, 1].mean())), float(100 * arr[sel, 2].mean()))
    return TrajectoryMetrics(float(np.degrees(arr[:, 1].mean())), float(100 * arr[:, 2].mean()), len(errors), per_length)


def relative_translation_norms(poses) -> np.ndarray:
    return np.array([np.linalg.norm(poses[k - 1].inverse().compose(poses[k]).t) for k in range(1, len(poses))])


def scale_drift_report(estimate, min_step: float = 1e-9) -> ScaleDriftReport:
    '''
    Compare each forward step of a mirrored run (forward frames then the same frames reversed,
    middle repeated) with its reverse counterpart: 100 * (|t_rev| - |t_fwd|) / |t_fwd|.
    '''
    n = len(estimate)
    if n % 2 or n < 4:
        raise ValueError(f'A mirrored trajectory has an even number of frames >= 4, got {n}')
    m = n // 2
    norms = relative_translation_norms(estimate)
    fwd = norms[:m - 1]
    # forward step k (frame k -> k+1) is retraced by step n-2-k
    rev = norms[[n - 2 - k for k in range(m - 1)]]
    flagged = fwd < min_step
    with np.errstate(divide='ignore', invalid='ignore'):
        pct = np.where(flagged, np.nan, 100.0 * (rev - fwd) / fwd)
    return ScaleDriftReport(fwd, rev, pct, flagged)


def write_metrics(path, metrics: TrajectoryMetrics) -> Path:
    path = Path(path)
    path.write_text(json.dumps(metrics.as_dict(), indent=2))
    return path
