# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.loopclosure
'''
Loop closure and pose-graph back end.

Candidates come from trajectory proximity, are screened by image similarity and verified by
running the flow/geometry front end on the pair. Verified loops join the odometry edges in a
pose graph that is optimized with a Huber kernel on loop edges.

Edge measurements are Z_ij = T_i^-1 T_j for camera-to-world vertices T. Residuals are
[translation, rotation vector] of Z_ij^-1 T_i^-1 T_j, matching the g2o SE3:QUAT information
layout.
'''
import dataclasses
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import least_squares
from scipy.sparse import lil_matrix
from scipy.spatial.transform import Rotation
from skimage.metrics import structural_similarity
import structlog

from mahalvo.config import GraphConfig, LoopConfig, PipelineConfig
from mahalvo.epipolar import decompose_essential, essential_from_fundamental, ransac_mahalanobis
from mahalvo.errors import SequenceFormatError, VOError
from mahalvo.flow import to_gray_float
from mahalvo.geometry import CameraIntrinsics, PoseSE3, epipolar_lines, homogeneous
from mahalvo.reconstruction import MotionBranch, parallax_gate, pnp_pose, triangulate

logger = structlog.get_logger(__name__)

EDGE_ODOMETRY = 'odometry'
EDGE_LOOP = 'loop'
MIN_SIGMA_ROT = 1e-4  # rad


@dataclasses.dataclass
class LoopCandidate:
    i: int
    j: int
    ssim: float = float('nan')
    reliability: float = float('nan')
    status: str = 'proposed'  # proposed | ssim_pass | verified | rejected
    cause: str | None = None
    measurement: PoseSE3 | None = None
    info: np.ndarray | None = None
    branch: str | None = None

    def as_record(self) -> dict:
        return {'i': self.i, 'j': self.j, 'ssim': self.ssim, 'reliability': self.reliability,
                'status': self.status, 'cause': self.cause, 'branch': self.branch}


@dataclasses.dataclass(eq=False)
class GraphEdge:
    i: int
    j: int
    measurement: PoseSE3
    info: np.ndarray  # (6, 6)
    kind: str = EDGE_ODOMETRY


class PoseGraph:
    '''Camera-to-world vertices joined by relative-pose edges. Vertex 0 anchors the gauge.'''
    def __init__(self, vertices: Sequence[PoseSE3] | None = None):
        self.vertices: list[PoseSE3] = list(vertices or [])
        self.edges: list[GraphEdge] = []

    def add_vertex(self, pose: PoseSE3) -> int:
        self.vertices.append(pose)
        return len(self.vertices) - 1

    def add_edge(self, i: int, j: int, measurement: PoseSE3, info: np.ndarray, kind: str = EDGE_ODOMETRY) -> GraphEdge:
        n = len(self.vertices)
        if not (0 <= i < n and 0 <= j < n) or i == j:
            raise ValueError(f'Edge ({i}, {j}) does not join two distinct vertices of {n}')
        info = np.asarray(info, dtype=float)
        if info.shape != (6, 6) or not np.allclose(info, info.T, atol=1e-9):
            raise ValueError('Edge information must be a symmetric 6x6 matrix')
        if np.linalg.eigvalsh(info)[0] < -1e-9:
            raise ValueError('Edge information must be positive semi-definite')
        edge = GraphEdge(i, j, measurement, info, kind)
        self.edges.append(edge)
        return edge

    def add_odometry_chain(self, info: np.ndarray):
        for k in range(1, len(self.vertices)):
            rel = self.vertices[k - 1].inverse().compose(self.vertices[k])
            self.add_edge(k - 1, k, rel, info, EDGE_ODOMETRY)

    def has_odometry_chain(self) -> bool:
        linked = {(e.i, e.j) for e in self.edges if e.kind == EDGE_ODOMETRY}
        return all((k - 1, k) in linked for k in range(1, len(self.vertices)))

    @property
    def loop_edges(self) -> list[GraphEdge]:
        return [e for e in self.edges if e.kind == EDGE_LOOP]


@dataclasses.dataclass(eq=False)
class GraphResult:
    vertices: list[PoseSE3]
    iterations: int
    cost_history: list[float]
    status: str  # converged | max_iters | diverged | trivial


def odometry_information(cfg: GraphConfig) -> np.ndarray:
    return np.diag([cfg.odometry_info_trans] * 3 + [cfg.odometry_info_rot] * 3)


def _sqrt_info(info: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(info)
    return np.diag(np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


class _GraphProblem:
    '''Vectorized whitened residuals over all edges for right-multiplied vertex increments.'''
    def __init__(self, graph: PoseGraph):
        self.n = len(graph.vertices)
        self.R0 = np.stack([v.R for v in graph.vertices])
        self.t0 = np.stack([v.t for v in graph.vertices])
        self.I = np.array([e.i for e in graph.edges])
        self.J = np.array([e.j for e in graph.edges])
        self.RZ = np.stack([e.measurement.R for e in graph.edges])
        self.tZ = np.stack([e.measurement.t for e in graph.edges])
        self.W = np.stack([_sqrt_info(e.info) for e in graph.edges])
        self.is_loop = np.array([e.kind == EDGE_LOOP for e in graph.edges])

    def poses(self, delta: np.ndarray, R0=None, t0=None) -> tuple[np.ndarray, np.ndarray]:
        R0 = self.R0 if R0 is None else R0
        t0 = self.t0 if t0 is None else t0
        d = np.zeros((self.n, 6))
        d[1:] = delta.reshape(-1, 6)
        dR = Rotation.from_rotvec(d[:, 3:]).as_matrix()
        R = R0 @ dR
        t = t0 + np.einsum('nij,nj->ni', R0, d[:, :3])
        return R, t

    def whitened(self, R: np.ndarray, t: np.ndarray) -> np.ndarray:
        Ri, Rj, ti, tj = R[self.I], R[self.J], t[self.I], t[self.J]
        R_rel = np.einsum('nji,njk->nik', Ri, Rj)
        t_rel = np.einsum('nji,nj->ni', Ri, tj - ti)
        R_err = np.einsum('nji,njk->nik', self.RZ, R_rel)
        t_err = np.einsum('nji,nj->ni', self.RZ, t_rel - self.tZ)
        r = np.concatenate([t_err, Rotation.from_matrix(R_err).as_rotvec()], axis=1)
        return np.einsum('nij,nj->ni', self.W, r)

    def robust_cost(self, rw: np.ndarray, delta_h: float) -> float:
        norms = np.linalg.norm(rw, axis=1)
        quad = 0.5 * norms ** 2
        huber = np.where(norms <= delta_h, quad, delta_h * (norms - 0.5 * delta_h))
        return float(np.sum(np.where(self.is_loop, huber, quad)))

    def sparsity(self) -> lil_matrix:
        m = 6 * len(self.I)
        A = lil_matrix((m, 6 * (self.n - 1)), dtype=int)
        for e, (i, j) in enumerate(zip(self.I, self.J)):
            for v in (i, j):
                if v > 0:
                    A[6 * e:6 * e + 6, 6 * (v - 1):6 * v] = 1
        return A


def pose_graph_optimize(graph: PoseGraph, cfg: GraphConfig | None = None) -> GraphResult:
    '''
    Iteratively reweighted least squares: Huber weights on loop edges are frozen for each inner
    sparse least-squares solve, then recomputed. Stops when the robust cost changes by less than
    cfg.tol or after cfg.max_iters; three consecutive cost increases abort with the best estimate.
    '''
    cfg = cfg or GraphConfig()
    if len(graph.vertices) < 2 or not graph.edges:
        return GraphResult(list(graph.vertices), 0, [], 'trivial')
    prob = _GraphProblem(graph)
    R, t = prob.R0, prob.t0
    cost = prob.robust_cost(prob.whitened(R, t), cfg.huber_delta)
    history = [cost]
    if cost < 1e-18:
        return GraphResult(list(graph.vertices), 0, history, 'converged')
    best = (cost, R, t)
    sparsity = prob.sparsity()
    increases = 0
    status = 'max_iters'
    it = 0
    for it in range(1, cfg.max_iters + 1):
        norms = np.linalg.norm(prob.whitened(R, t), axis=1)
        w = np.ones(len(norms))
        big = prob.is_loop & (norms > cfg.huber_delta)
        w[big] = cfg.huber_delta / norms[big]
        sw = np.sqrt(w)[:, None]
        R_base, t_base = R, t

        def fun(delta):
            Rd, td = prob.poses(delta, R_base, t_base)
            return (sw * prob.whitened(Rd, td)).ravel()

        sol = least_squares(fun, np.zeros(6 * (prob.n - 1)), jac_sparsity=sparsity, method='trf',
                            x_scale=1.0, xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=100)
        R, t = prob.poses(sol.x, R_base, t_base)
        new_cost = prob.robust_cost(prob.whitened(R, t), cfg.huber_delta)
        history.append(new_cost)
        logger.debug('Pose graph iteration', iteration=it, cost=new_cost)
        if new_cost < best[0]:
            best = (new_cost, R, t)
        increases = increases + 1 if new_cost > cost else 0
        if increases >= 3:
            logger.warning('Pose graph cost grew three times in a row; keeping the best estimate', iteration=it)
            status = 'diverged'
            break
        if abs(cost - new_cost) < cfg.tol:
            cost = new_cost
            status = 'converged'
            break
        cost = new_cost
    _, R, t = best
    vertices = [graph.vertices[0]] + [PoseSE3(R[k], t[k]) for k in range(1, prob.n)]
    logger.info('Pose graph optimized', status=status, iterations=it, initial_cost=history[0], final_cost=best[0],
                loops=int(prob.is_loop.sum()))
    return GraphResult(vertices, it, history, status)


def ssim(img1: np.ndarray, img2: np.ndarray) -> float:
    '''Gaussian-weighted structural similarity of two grayscale images in [-1, 1]'''
    if img1.shape != img2.shape:
        raise ValueError(f'SSIM needs equal shapes, got {img1.shape} vs {img2.shape}')
    a, b = to_gray_float(img1), to_gray_float(img2)
    value = structural_similarity(a, b, data_range=1.0, gaussian_weights=True, sigma=1.5,
                                  use_sample_covariance=False)
    return float(np.clip(value, -1.0, 1.0))


def find_candidates(trajectory: Sequence[PoseSE3], radius: float = 10.0, min_index_gap: int = 100,
                    stride: int = 10) -> list[LoopCandidate]:
    '''
    Pairs (i, j) with j a multiple of stride, j - i >= min_index_gap and camera centres no more
    than radius apart.
    '''
    if stride < 1:
        raise ValueError(f'Loop stride must be >= 1, got {stride}')
    centres = np.array([p.t for p in trajectory]).reshape(-1, 3)
    out = []
    for j in range(stride, len(centres), stride):
        last = j - max(min_index_gap, 1)
        if last < 0:
            continue
        dist = np.linalg.norm(centres[:last + 1] - centres[j], axis=1)
        out.extend(LoopCandidate(int(i), j) for i in np.flatnonzero(dist <= radius))
    logger.debug('Loop candidates by proximity', count=len(out))
    return out


def gate_by_ssim(candidates: Sequence[LoopCandidate], images: Callable[[int], np.ndarray] | None = None,
                 threshold: float = 0.38, max_keep: int = 3) -> list[LoopCandidate]:
    '''
    Keep candidates whose image similarity reaches threshold, at most max_keep per query frame,
    best first. Candidates that already carry a similarity value are not recomputed.
    Returns the full list with updated statuses.
    '''
    scored = []
    for cand in candidates:
        value = cand.ssim
        if np.isnan(value):
            if images is None:
                raise ValueError('Candidate has no similarity score and no image source was given')
            value = ssim(images(cand.i), images(cand.j))
        if value < threshold:
            scored.append(dataclasses.replace(cand, ssim=value, status='rejected', cause='ssim'))
        else:
            scored.append(dataclasses.replace(cand, ssim=value, status='ssim_pass'))
    by_query: dict[int, list[LoopCandidate]] = {}
    for cand in scored:
        if cand.status == 'ssim_pass':
            by_query.setdefault(cand.j, []).append(cand)
    for group in by_query.values():
        group.sort(key=lambda c: (-c.ssim, c.i))
        for cand in group[max_keep:]:
            cand.status, cand.cause = 'rejected', 'ssim_rank'
    for cand in scored:
        if cand.status == 'rejected':
            logger.debug('Loop candidate rejected', i=cand.i, j=cand.j, ssim=cand.ssim, cause=cand.cause)
    return scored


def _loop_information(sigma_rot: float, sigma_trans: float) -> np.ndarray:
    sigma_rot = max(sigma_rot, MIN_SIGMA_ROT)
    sigma_trans = max(sigma_trans, 1e-3)
    return np.diag([1.0 / sigma_trans ** 2] * 3 + [1.0 / sigma_rot ** 2] * 3)


def verify_by_flow(cand: LoopCandidate, source, structure_i, K: CameraIntrinsics,
                   cfg: PipelineConfig | None = None) -> LoopCandidate:
    '''
    Run the front end on the pair (i, j). Low flow reliability rejects the candidate; otherwise
    the parallax gate picks eight-point (scaled against frame i's stored structure) or PnP on
    that structure. The verified candidate carries Z_ij and an information matrix built from
    the fit residuals.
    '''
    cfg = cfg or PipelineConfig()
    cand = dataclasses.replace(cand)
    pm = source.match(cand.i, cand.j)
    cand.reliability = pm.reliability
    if pm.reliability < cfg.loop.reliability or len(pm.matches) < 8:
        cand.status, cand.cause = 'rejected', 'reliability'
        logger.info('Loop candidate rejected by flow reliability', i=cand.i, j=cand.j, reliability=pm.reliability)
        return cand
    if structure_i is None:
        cand.status, cand.cause = 'rejected', 'no_structure'
        return cand
    prior_pts, _, found = structure_i.lookup(pm.keys_prev)
    try:
        branch = parallax_gate(pm.corner_disp, pm.flow_mag, cfg.parallax.median_gate, cfg.parallax.q3_gate)
        cand.branch = branch.value
        if branch == MotionBranch.FULL:
            rr = ransac_mahalanobis(pm.matches, cfg.ransac)
            if not rr.ok:
                raise VOError(f'epipolar estimation failed: {rr.cause}')
            inl = pm.matches.subset(rr.inliers)
            E = essential_from_fundamental(rr.F, K)
            unit = decompose_essential(E, inl, K)
            cloud = triangulate(unit, K, K, inl)
            overlap = found[rr.inliers] & cloud.valid
            if overlap.sum() < 3:
                raise VOError('no stored depth overlaps the loop pair')
            s = float(np.median(prior_pts[rr.inliers][overlap, 2] / cloud.xyz[overlap, 2]))
            rel = unit.with_translation(unit.t * s)
            lines = epipolar_lines(rr.F.F, inl.x)
            # pixel distance of x' to its epipolar line
            line_err = np.abs(np.einsum('ij,ij->i', homogeneous(inl.x_prime), lines)) / np.hypot(lines[:, 0], lines[:, 1])
            sigma_rot = float(np.median(line_err)) / K.fx
            sigma_trans = sigma_rot * float(np.median(prior_pts[rr.inliers][overlap, 2]))
        else:
            pnp = pnp_pose(prior_pts[found], pm.matches.x_prime[found], K, cfg.fusion.pnp_threshold,
                           cfg.fusion.pnp_iters, cfg.seed)
            if not pnp.ok:
                raise VOError(f'PnP failed: {pnp.cause}')
            rel = pnp.pose
            sigma_rot = pnp.rms / K.fx
            sigma_trans = sigma_rot * float(np.median(prior_pts[found][:, 2]))
    except VOError as e:
        cand.status, cand.cause = 'rejected', 'geometry'
        logger.info('Loop candidate failed geometric verification', i=cand.i, j=cand.j, error=str(e))
        return cand
    cand.measurement = rel.inverse()
    cand.info = _loop_information(sigma_rot, sigma_trans)
    cand.status = 'verified'
    logger.info('Loop verified', i=cand.i, j=cand.j, branch=cand.branch, reliability=pm.reliability)
    return cand


def write_g2o(path, graph: PoseGraph) -> Path:
    '''VERTEX_SE3:QUAT / EDGE_SE3:QUAT text with the upper triangle of each information matrix'''
    path = Path(path)
    iu = np.triu_indices(6)
    with path.open('w') as fp:
        for k, v in enumerate(graph.vertices):
            q = Rotation.from_matrix(v.R).as_quat()
            fp.write(f'VERTEX_SE3:QUAT {k} ' + ' '.join(f'{x:.17g}' for x in (*v.t, *q)) + '\n')
        fp.write('FIX 0\n')
        for e in graph.edges:
            q = Rotation.from_matrix(e.measurement.R).as_quat()
            vals = (*e.measurement.t, *q, *e.info[iu])
            fp.write(f'EDGE_SE3:QUAT {e.i} {e.j} ' + ' '.join(f'{x:.17g}' for x in vals) + '\n')
    return path


def read_g2o(path) -> PoseGraph:
    '''Edges joining consecutive vertices are read back as odometry, all others as loops'''
    path = Path(path)
    graph = PoseGraph()
    iu = np.triu_indices(6)
    with path.open() as fp:
        for line_no, line in enumerate(fp, 1):
            parts = line.split()
            if not parts or parts[0] == 'FIX':
                continue
            try:
                if parts[0] == 'VERTEX_SE3:QUAT':
                    vals = np.array(parts[2:9], dtype=float)
                    if len(vals) != 7 or int(parts[1]) != len(graph.vertices):
                        raise ValueError('bad vertex record')
                    graph.add_vertex(PoseSE3(Rotation.from_quat(vals[3:]).as_matrix(), vals[:3]))
                elif parts[0] == 'EDGE_SE3:QUAT':
                    i, j = int(parts[1]), int(parts[2])
                    vals = np.array(parts[3:], dtype=float)
                    if len(vals) != 28:
                        raise ValueError('bad edge record')
                    info = np.zeros((6, 6))
                    info[iu] = vals[7:]
                    info = info + np.triu(info, 1).T
                    meas = PoseSE3(Rotation.from_quat(vals[3:7]).as_matrix(), vals[:3])
                    graph.add_edge(i, j, meas, info, EDGE_ODOMETRY if j == i + 1 else EDGE_LOOP)
                else:
                    raise ValueError(f'unknown record {parts[0]}')
            except ValueError as e:
                raise SequenceFormatError(str(e), path=path, line_no=line_no)
    return graph
