# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.flow
'''
Dense optical flow with per-pixel uncertainty.

A matching cost volume over a square displacement window is built from normalized patch
descriptors, optionally biased toward the epipolar line of each pixel, smoothed by scanline
aggregation and reduced to an integer flow field. A quadratic fitted to the cost surface around
each chosen displacement gives the 2x2 information matrix of that flow vector.

Cost volume layout: costs[y, x, i, j] is the cost of displacement (du, dv) = (j - r, i - r)
with r = window // 2. Costs lie in [0, 1] before epipolar injection.
'''
import dataclasses

import cv2
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
import structlog

from mahalvo.errors import DegenerateGeometryError
from mahalvo.geometry import (SENTINEL_EPS, InfoMatrix2, Pixel2, info_min_eigenvalue, sentinel_info)

logger = structlog.get_logger(__name__)

DEFAULT_PATCH = 7
# Eigenvalue ratio below which the quadratic design is treated as rank deficient
DESIGN_RANK_TOL = 1e-10


@dataclasses.dataclass
class FlowConfig:
    '''Dense-flow knobs. Displacements and tolerances in pixels of the working (downscaled) image.'''
    downscale: int = 3
    window: int = 15
    patch: int = DEFAULT_PATCH
    epipolar_gain: float = 0.01
    epipolar_truncation: float = 0.5
    smoothness: float = 0.05
    fit_threshold: float = 0.7
    cost_scale: float = 2.0
    fb_tolerance: float = 1.0
    info_threshold: float = 0.05
    match_stride: int = 4
    max_corners: int = 500


@dataclasses.dataclass(eq=False)
class CostVolume:
    costs: np.ndarray  # (M, N, D, D)
    epipolar_skipped: np.ndarray | None = None  # (M, N) pixels whose epipolar line was degenerate

    @property
    def height(self) -> int:
        return self.costs.shape[0]

    @property
    def width(self) -> int:
        return self.costs.shape[1]

    @property
    def window(self) -> int:
        return self.costs.shape[2]

    @property
    def radius(self) -> int:
        return self.costs.shape[2] // 2


@dataclasses.dataclass(eq=False)
class FlowField:
    '''Per-pixel mean displacement, packed information matrix (Yxx, Yxy, Yyy) and validity.'''
    flow: np.ndarray   # (M, N, 2) as (du, dv)
    info: np.ndarray   # (M, N, 3)
    valid: np.ndarray  # (M, N) bool

    def __post_init__(self):
        if self.flow.shape[:2] != self.info.shape[:2] or self.flow.shape[:2] != self.valid.shape:
            raise ValueError(f'Inconsistent flow field shapes {self.flow.shape} {self.info.shape} {self.valid.shape}')

    @property
    def shape(self) -> tuple[int, int]:
        return self.flow.shape[:2]

    def magnitudes(self, valid_only: bool = True) -> np.ndarray:
        mags = np.linalg.norm(self.flow, axis=-1)
        return mags[self.valid] if valid_only else mags

    @classmethod
    def means_only(cls, flow: np.ndarray) -> 'FlowField':
        return cls(flow, sentinel_info(flow.shape[:2]), np.ones(flow.shape[:2], dtype=bool))


def displacement_grid(window: int) -> tuple[np.ndarray, np.ndarray]:
    '''(du, dv) offset arrays of shape (D, D), indexed [i, j]'''
    r = window // 2
    dv, du = np.mgrid[-r:r + 1, -r:r + 1]
    return du.astype(float), dv.astype(float)


def to_gray_float(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        img = cv2.cvtColor(img, cv2.COLOR_BGR2GRAY)
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    return img.astype(np.float64)


def patch_descriptors(img: np.ndarray, patch: int = DEFAULT_PATCH) -> np.ndarray:
    '''Zero-mean, unit-norm patch vectors (M, N, patch*patch); textureless patches become zero'''
    r = patch // 2
    padded = np.pad(img.astype(np.float64), r, mode='reflect')
    win = sliding_window_view(padded, (patch, patch)).reshape(img.shape[0], img.shape[1], patch * patch)
    win = win - win.mean(axis=-1, keepdims=True)
    norm = np.linalg.norm(win, axis=-1, keepdims=True)
    flat = norm[..., 0] < 1e-12
    norm[flat] = 1.0
    desc = win / norm
    desc[flat] = 0.0
    return desc


def build_cost_volume(img1: np.ndarray, img2: np.ndarray, window: int, patch: int = DEFAULT_PATCH) -> CostVolume:
    '''
    Matching costs 1 - max(<d1, d2>, 0) between normalized patches of img1 and displaced
    patches of img2. Candidates that fall outside img2 cost 1.
    '''
    if img1.shape != img2.shape:
        raise ValueError(f'Image shapes differ: {img1.shape} vs {img2.shape}')
    if window < 3 or window % 2 == 0:
        raise ValueError(f'Displacement window must be odd and >= 3, got {window}')
    f1 = patch_descriptors(to_gray_float(img1), patch)
    f2 = patch_descriptors(to_gray_float(img2), patch)
    M, N = f1.shape[:2]
    r = window // 2
    costs = np.ones((M, N, window, window))
    for i in range(window):
        dv = i - r
        y0, y1 = max(0, -dv), min(M, M - dv)
        if y0 >= y1:
            continue
        for j in range(window):
            du = j - r
            x0, x1 = max(0, -du), min(N, N - du)
            if x0 >= x1:
                continue
            dot = np.einsum('ijk,ijk->ij', f1[y0:y1, x0:x1], f2[y0 + dv:y1 + dv, x0 + du:x1 + du])
            costs[y0:y1, x0:x1, i, j] = 1.0 - np.clip(dot, 0.0, 1.0)
    return CostVolume(costs)


def inject_epipolar_cost(vol: CostVolume, F: np.ndarray, gain: float = 0.01, truncation: float = 0.5) -> CostVolume:
    '''
    Add min(gain * d^2, truncation) to every candidate, d being the Euclidean distance of the
    candidate target to the epipolar line F x of its source pixel. Pixels whose line is
    degenerate keep their costs and are flagged in epipolar_skipped.
    '''
    if gain <= 0 or truncation <= 0:
        raise ValueError(f'Epipolar gain and truncation must be positive, got {gain}, {truncation}')
    M, N, D, _ = vol.costs.shape
    ys, xs = np.mgrid[0:M, 0:N].astype(float)
    F = np.asarray(F, dtype=float)
    a = F[0, 0] * xs + F[0, 1] * ys + F[0, 2]
    b = F[1, 0] * xs + F[1, 1] * ys + F[1, 2]
    c = F[2, 0] * xs + F[2, 1] * ys + F[2, 2]
    norm2 = a * a + b * b
    degenerate = norm2 <= np.finfo(float).tiny
    safe = np.where(degenerate, 1.0, norm2)
    du, dv = displacement_grid(D)
    qu = xs[..., None, None] + du
    qv = ys[..., None, None] + dv
    resid = a[..., None, None] * qu + b[..., None, None] * qv + c[..., None, None]
    increment = np.minimum(gain * resid * resid / safe[..., None, None], truncation)
    increment[degenerate] = 0.0
    n_skipped = int(degenerate.sum())
    if n_skipped:
        logger.warning(f'{n_skipped} pixels have a degenerate epipolar line; left without epipolar cost',
                       n_skipped=n_skipped)
    return CostVolume(vol.costs + increment, degenerate)


def _min_l1_convolution(f: np.ndarray, penalty: float) -> np.ndarray:
    '''min over d' of f(d') + penalty * |d - d'|_1, over the last two axes'''
    g = f.copy()
    D = g.shape[-1]
    for j in range(1, D):
        np.minimum(g[..., j], g[..., j - 1] + penalty, out=g[..., j])
    for j in range(D - 2, -1, -1):
        np.minimum(g[..., j], g[..., j + 1] + penalty, out=g[..., j])
    for i in range(1, D):
        np.minimum(g[..., i, :], g[..., i - 1, :] + penalty, out=g[..., i, :])
    for i in range(D - 2, -1, -1):
        np.minimum(g[..., i, :], g[..., i + 1, :] + penalty, out=g[..., i, :])
    return g


def _scan_terms(costs: np.ndarray, penalty: float) -> np.ndarray:
    '''Smoothness terms of a left-to-right scanline pass along axis 1; zero at the first column'''
    terms = np.zeros_like(costs)
    path = costs[:, 0].copy()
    for x in range(1, costs.shape[1]):
        prev_min = path.min(axis=(-2, -1), keepdims=True)
        term = _min_l1_convolution(path, penalty) - prev_min
        terms[:, x] = term
        path = costs[:, x] + term
    return terms


def regularize(vol: CostVolume, smoothness: float) -> CostVolume:
    '''
    Four-direction scanline aggregation with an L1 penalty between neighbouring displacements.
    Each pixel's output is its own cost plus the mean of the directional smoothness terms, so
    the cost scale is preserved.
    '''
    if smoothness < 0:
        raise ValueError(f'Smoothness must be non-negative, got {smoothness}')
    if smoothness == 0:
        return CostVolume(vol.costs.copy(), vol.epipolar_skipped)
    C = vol.costs
    Ct = C.transpose(1, 0, 2, 3)
    total = _scan_terms(C, smoothness)
    total += _scan_terms(C[:, ::-1], smoothness)[:, ::-1]
    total += _scan_terms(Ct, smoothness).transpose(1, 0, 2, 3)
    total += _scan_terms(Ct[:, ::-1], smoothness)[:, ::-1].transpose(1, 0, 2, 3)
    return CostVolume(C + 0.25 * total, vol.epipolar_skipped)


def extract_flow(vol: CostVolume) -> FlowField:
    '''
    Per-pixel argmin displacement. Ties go to the smallest displacement magnitude, then to the
    first candidate in row-major window order.
    '''
    M, N, D, _ = vol.costs.shape
    du, dv = displacement_grid(D)
    mag = np.hypot(du, dv).ravel()
    order = np.lexsort((np.arange(D * D), mag))
    flat = vol.costs.reshape(M, N, D * D)[..., order]
    best = order[np.argmin(flat, axis=-1)]
    flow = np.stack([du.ravel()[best], dv.ravel()[best]], axis=-1)
    return FlowField.means_only(flow)


def _fit_quadratic(costs: np.ndarray, rel_u: np.ndarray, rel_v: np.ndarray, offset: np.ndarray,
                   threshold: float, cost_scale: float) -> tuple[np.ndarray, np.ndarray]:
    '''
    Batched least-squares fit of d^2 = Yxx u^2 + 2 Yxy u v + Yyy v^2 over candidates whose cost
    exceeds the offset by less than threshold, with d^2 = cost_scale * (cost - offset).
    Inputs are (..., K); returns packed info (..., 3) and a fit-ok mask (...).
    '''
    excess = costs - offset[..., None]
    use = (excess < threshold) & ~((rel_u == 0) & (rel_v == 0))
    w = use.astype(float)
    A = np.stack([rel_u * rel_u, 2.0 * rel_u * rel_v, rel_v * rel_v], axis=-1)
    d2 = cost_scale * excess
    AtA = np.einsum('...ki,...k,...kj->...ij', A, w, A)
    Atd = np.einsum('...ki,...k,...k->...i', A, w, d2)
    eig = np.linalg.eigvalsh(AtA)
    ok = (use.sum(axis=-1) >= 3) & (eig[..., 2] > 0) & (eig[..., 0] > DESIGN_RANK_TOL * eig[..., 2])
    AtA = np.where(ok[..., None, None], AtA, np.eye(3))
    sol = np.linalg.solve(AtA, Atd[..., None])[..., 0]
    info = np.where(ok[..., None], sol, sentinel_info(ok.shape))
    return _clamp_positive_definite(info, ok), ok


def _clamp_positive_definite(info: np.ndarray, ok: np.ndarray) -> np.ndarray:
    '''Floor the eigenvalues of fitted matrices at SENTINEL_EPS; others pass unchanged'''
    needs = ok & (info_min_eigenvalue(info) < SENTINEL_EPS)
    if not needs.any():
        return info
    m = info[needs]
    mats = np.stack([np.stack([m[:, 0], m[:, 1]], -1), np.stack([m[:, 1], m[:, 2]], -1)], -2)
    vals, vecs = np.linalg.eigh(mats)
    vals = np.maximum(vals, SENTINEL_EPS)
    fixed = np.einsum('nij,nj,nkj->nik', vecs, vals, vecs)
    out = info.copy()
    out[needs] = np.stack([fixed[:, 0, 0], fixed[:, 0, 1], fixed[:, 1, 1]], -1)
    return out


def fit_information_matrix(cost_slice: np.ndarray, mu: Pixel2, cost_threshold: float = 0.7,
                           cost_scale: float = 2.0) -> InfoMatrix2:
    '''
    Fit the information matrix of one pixel from its (D, D) cost slice, centered on the
    displacement mu. When mu is an integer window cell its cost is the zero level; otherwise the
    slice is taken as already zero at mu. Too few or collinear samples give the sentinel.
    '''
    cost_slice = np.asarray(cost_slice, dtype=float)
    D = cost_slice.shape[0]
    r = D // 2
    du, dv = displacement_grid(D)
    offset = 0.0
    if float(mu.u).is_integer() and float(mu.v).is_integer() and abs(mu.u) <= r and abs(mu.v) <= r:
        offset = cost_slice[int(mu.v) + r, int(mu.u) + r]
    info, ok = _fit_quadratic(cost_slice.ravel()[None], (du.ravel() - mu.u)[None], (dv.ravel() - mu.v)[None],
                              np.array([offset]), cost_threshold, cost_scale)
    return InfoMatrix2.from_array(info[0])


def fit_information_field(vol: CostVolume, field: FlowField, cost_threshold: float = 0.7,
                          cost_scale: float = 2.0) -> FlowField:
    '''Information matrices for every pixel of an integer flow field drawn from vol'''
    M, N, D, _ = vol.costs.shape
    r = D // 2
    du, dv = displacement_grid(D)
    du, dv = du.ravel(), dv.ravel()
    mu = np.rint(field.flow).astype(int)
    info = np.empty((M, N, 3))
    n_fail = 0
    for y in range(M):  # row batches keep the design tensors small
        costs = vol.costs[y].reshape(N, D * D)
        idx = (mu[y, :, 1] + r) * D + (mu[y, :, 0] + r)
        offset = np.take_along_axis(costs, idx[:, None], axis=1)[:, 0]
        rel_u = du[None, :] - mu[y, :, 0:1]
        rel_v = dv[None, :] - mu[y, :, 1:2]
        info[y], ok = _fit_quadratic(costs, rel_u, rel_v, offset, cost_threshold, cost_scale)
        n_fail += int((~ok).sum())
    logger.debug('Fitted flow information field', pixels=M * N, unreliable=n_fail)
    return FlowField(field.flow.copy(), info, field.valid.copy())


def forward_backward_filter(fwd: FlowField, bwd: FlowField, tolerance: float = 1.0) -> FlowField:
    '''
    Invalidate pixels whose forward flow is not undone by the backward flow at the rounded target
    (clamped into the image). Invalid pixels carry the sentinel information matrix.
    '''
    if fwd.shape != bwd.shape:
        raise ValueError(f'Forward and backward flow shapes differ: {fwd.shape} vs {bwd.shape}')
    M, N = fwd.shape
    ys, xs = np.mgrid[0:M, 0:N]
    tx = np.clip(np.rint(xs + fwd.flow[..., 0]).astype(int), 0, N - 1)
    ty = np.clip(np.rint(ys + fwd.flow[..., 1]).astype(int), 0, M - 1)
    err = np.linalg.norm(fwd.flow + bwd.flow[ty, tx], axis=-1)
    valid = fwd.valid & (err <= tolerance)
    info = np.where(valid[..., None], fwd.info, sentinel_info((M, N)))
    return FlowField(fwd.flow.copy(), info, valid)


def _info_to_cov(info: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    det = info[..., 0] * info[..., 2] - info[..., 1] ** 2
    safe = np.where(det > 0, det, 1.0)
    cov = np.stack([info[..., 2], -info[..., 1], info[..., 0]], axis=-1) / safe[..., None]
    return cov, det


def rescale_uncertainty(field: FlowField, factor: float, shape: tuple[int, int] | None = None) -> FlowField:
    '''
    Resample a flow field to another resolution. Flow vectors scale by factor, covariances by
    factor^2; interpolation happens in covariance space. shape overrides the rounded target size.
    '''
    if factor <= 0:
        raise ValueError(f'Rescale factor must be positive, got {factor}')
    M, N = field.shape
    cov, det = _info_to_cov(field.info)
    sentinel = (field.info[..., 0] <= SENTINEL_EPS) & (field.info[..., 2] <= SENTINEL_EPS) \
        & (field.info[..., 1] == 0)
    if (field.valid & ~sentinel & (det <= 0)).any():
        raise DegenerateGeometryError('Singular information matrix on a valid flow pixel')
    cov[~(det > 0)] = np.array([1.0 / SENTINEL_EPS, 0.0, 1.0 / SENTINEL_EPS])
    target = shape or (int(round(M * factor)), int(round(N * factor)))
    flow = field.flow
    valid = field.valid
    if target != (M, N):
        size = (target[1], target[0])
        cov = cv2.resize(cov, size, interpolation=cv2.INTER_LINEAR)
        flow = cv2.resize(flow, size, interpolation=cv2.INTER_LINEAR)
        valid = cv2.resize(valid.astype(np.uint8), size, interpolation=cv2.INTER_NEAREST).astype(bool)
    cov = cov * factor * factor
    flow = flow * factor
    info, det = _info_to_cov(cov)
    info[~valid | ~(det > 0)] = np.array([SENTINEL_EPS, 0.0, SENTINEL_EPS])
    return FlowField(flow, info, valid)


def reliability_fraction(field: FlowField, info_threshold: float = 0.05) -> float:
    '''Fraction of all pixels that are valid with smallest information eigenvalue above threshold'''
    total = field.valid.size
    if total == 0:
        return 0.0
    good = field.valid & (info_min_eigenvalue(field.info) > info_threshold)
    return float(good.sum()) / total


def scale_fundamental(F: np.ndarray, downscale: int) -> np.ndarray:
    '''F for images shrunk by an integer factor with area averaging'''
    off = 0.5 * (downscale - 1)
    S = np.array([[downscale, 0.0, off], [0.0, downscale, off], [0.0, 0.0, 1.0]])
    Fs = S.T @ np.asarray(F, dtype=float) @ S
    return Fs / np.linalg.norm(Fs)


def _one_way_flow(img1, img2, F, cfg: FlowConfig) -> FlowField:
    vol = build_cost_volume(img1, img2, cfg.window, cfg.patch)
    if F is not None:
        vol = inject_epipolar_cost(vol, F, cfg.epipolar_gain, cfg.epipolar_truncation)
    vol = regularize(vol, cfg.smoothness)
    field = extract_flow(vol)
    return fit_information_field(vol, field, cfg.fit_threshold, cfg.cost_scale)


def compute_dense_flow(img1: np.ndarray, img2: np.ndarray, F: np.ndarray | None = None,
                       cfg: FlowConfig | None = None) -> FlowField:
    '''
    Full-resolution flow with uncertainty: downscale, match both directions (epipolar-biased
    when F is known), cross-check, then rescale back to the input size.
    '''
    cfg = cfg or FlowConfig()
    g1, g2 = to_gray_float(img1), to_gray_float(img2)
    if g1.shape != g2.shape:
        raise ValueError(f'Image shapes differ: {g1.shape} vs {g2.shape}')
    H, W = g1.shape
    ds = max(1, int(cfg.downscale))
    if ds > 1:
        small = (max(1, W // ds), max(1, H // ds))
        g1 = cv2.resize(g1, small, interpolation=cv2.INTER_AREA)
        g2 = cv2.resize(g2, small, interpolation=cv2.INTER_AREA)
    Fs = scale_fundamental(F, ds) if F is not None else None
    fwd = _one_way_flow(g1, g2, Fs, cfg)
    bwd = _one_way_flow(g2, g1, Fs.T if Fs is not None else None, cfg)
    field = forward_backward_filter(fwd, bwd, cfg.fb_tolerance)
    logger.debug('Dense flow at working resolution', shape=field.shape, valid=int(field.valid.sum()),
                 epipolar=F is not None)
    return rescale_uncertainty(field, float(ds), shape=(H, W))


def match_corners(img1: np.ndarray, img2: np.ndarray, max_corners: int = 500) -> tuple[np.ndarray, np.ndarray]:
    '''Shi-Tomasi corners in img1 tracked into img2 with pyramidal Lucas-Kanade; (n, 2) each'''
    g1 = np.clip(to_gray_float(img1) * 255.0, 0, 255).astype(np.uint8)
    g2 = np.clip(to_gray_float(img2) * 255.0, 0, 255).astype(np.uint8)
    p0 = cv2.goodFeaturesToTrack(g1, maxCorners=max_corners, qualityLevel=0.01, minDistance=7,
                                 blockSize=7, useHarrisDetector=False)
    if p0 is None:
        return np.empty((0, 2)), np.empty((0, 2))
    lk_params = dict(winSize=(21, 21), maxLevel=3,
                     criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 20, 0.03))
    p1, st, _err = cv2.calcOpticalFlowPyrLK(g1, g2, p0, None, **lk_params)
    if p1 is None or st is None:
        return np.empty((0, 2)), np.empty((0, 2))
    good = st.reshape(-1) == 1
    return p0.reshape(-1, 2)[good].astype(float), p1.reshape(-1, 2)[good].astype(float)
