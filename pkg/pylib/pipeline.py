# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.pipeline
'''
Frame-to-frame odometry driver and the SLAM wrapper around it.

Per frame: match, parallax gate, then either the full chain (Mahalanobis RANSAC, essential
decomposition, triangulation, scale, optional PnP fusion) or PnP alone on the structure carried
over from the previous frame. Every decision is recorded for the run log.
'''
import dataclasses

import numpy as np
import structlog

from mahalvo.config import PipelineConfig
from mahalvo.epipolar import decompose_essential, essential_from_fundamental, ransac_mahalanobis
from mahalvo.errors import EstimationError, VOError
from mahalvo.geometry import CameraIntrinsics, PoseSE3
from mahalvo.loopclosure import (EDGE_LOOP, GraphResult, LoopCandidate, PoseGraph, find_candidates,
                                 gate_by_ssim, odometry_information, pose_graph_optimize, verify_by_flow)
from mahalvo.reconstruction import (DepthMap, MotionBranch, apply_scale, fit_ground_plane, fuse_poses, fuse_scales,
                                    parallax_gate, pnp_pose, scale_from_depth_ratio, scale_from_height,
                                    triangulate, update_camera_height)
from mahalvo.sources import KeyedStructure, PairMatches

logger = structlog.get_logger(__name__)


@dataclasses.dataclass
class FrameResult:
    frame: int
    ok: bool = True
    cause: str | None = None
    branch: str | None = None
    fusion: str | None = None  # 8pt | fused | pnp
    fusion_reason: str | None = None
    scale_source: str | None = None
    scale: float = float('nan')
    n_matches: int = 0
    n_inliers: int = 0
    reliability: float = float('nan')
    camera_height: float = float('nan')

    def as_record(self) -> dict:
        return dataclasses.asdict(self)


class OdometryPipeline:
    '''
    Stateful monocular odometry over a correspondence source. The trajectory holds camera-to-world
    poses with frame 0 at the origin.
    '''
    def __init__(self, source, intrinsics: CameraIntrinsics, image_size: tuple[int, int],
                 cfg: PipelineConfig | None = None):
        self.source = source
        self.K = intrinsics
        self.width, self.height = image_size
        self.cfg = cfg or PipelineConfig()
        self.trajectory: list[PoseSE3] = [PoseSE3.identity()]
        self.relative: list[PoseSE3] = []
        self.results: list[FrameResult] = []
        self.structure: KeyedStructure | None = None
        self.frame_structures: dict[int, KeyedStructure] = {}
        self.camera_height = self.cfg.scale.camera_height

    @property
    def failed_frames(self) -> list[int]:
        return [r.frame for r in self.results if not r.ok]

    def run(self, n_frames: int | None = None) -> list[FrameResult]:
        n_frames = n_frames or self.source.n_frames
        for k in range(len(self.trajectory), n_frames):
            self.step(k)
        logger.info('Odometry finished', frames=len(self.trajectory), failed=len(self.failed_frames))
        return self.results

    def step(self, k: int) -> FrameResult:
        '''Estimate frame k from frame k - 1 and append it to the trajectory'''
        if k != len(self.trajectory):
            raise ValueError(f'Frames must be processed in order; expected {len(self.trajectory)}, got {k}')
        pm = self.source.match(k - 1, k)
        result = FrameResult(frame=k, n_matches=len(pm.matches), reliability=pm.reliability)
        prior = self.structure
        try:
            if len(pm.matches) < 8:
                raise EstimationError(f'{len(pm.matches)} matches', cause='too_few_matches')
            branch = parallax_gate(pm.corner_disp, pm.flow_mag, self.cfg.parallax.median_gate,
                                   self.cfg.parallax.q3_gate)
            result.branch = branch.value
            if branch == MotionBranch.FULL or prior is None or not len(prior):
                if branch != MotionBranch.FULL:
                    logger.info('No structure for PnP yet; running the full pipeline', frame=k)
                    result.fusion_reason = 'bootstrap'
                rel, structure = self._full_step(pm, prior, result)
            else:
                rel, structure = self._pnp_step(pm, prior, result), prior
        except VOError as e:
            result.ok = False
            result.cause = getattr(e, 'cause', None) or type(e).__name__
            logger.warning(f'Frame {k} failed; carrying the previous pose', frame=k, error=str(e))
            rel, structure = PoseSE3.identity(), prior
        result.camera_height = self.camera_height
        if structure is not None:
            self.frame_structures[k - 1] = self.source.compact(structure)
            self.structure = self.source.propagate(structure, rel, self.cfg.scale.depth_std_inflation)
        self.relative.append(rel)
        self.trajectory.append(self.trajectory[-1].compose(rel.inverse()))
        self.results.append(result)
        logger.debug('Frame processed', **result.as_record())
        return result

    def _full_step(self, pm: PairMatches, prior: KeyedStructure | None,
                   result: FrameResult) -> tuple[PoseSE3, KeyedStructure | None]:
        cfg = self.cfg
        try:
            rr = ransac_mahalanobis(pm.matches, cfg.ransac)
            if not rr.ok:
                raise EstimationError('epipolar RANSAC failed', cause=rr.cause)
            inl = pm.matches.subset(rr.inliers)
            keys = pm.keys_prev[rr.inliers]
            result.n_inliers = rr.n_inliers
            unit = decompose_essential(essential_from_fundamental(rr.F, self.K), inl, self.K)
            cloud = triangulate(unit, self.K, self.K, inl)
            plane = fit_ground_plane(cloud, self.width, self.K.cx, cfg.scale.plane_normal_prior,
                                     cfg.scale.plane_inlier_tol, cfg.scale.plane_iters, cfg.seed)
            ground = scale_from_height(plane.plane, self.camera_height)
            depth, overlap = None, 0.0
            if prior is not None and len(prior):
                pts, std, found = prior.lookup(keys)
                prior_z = np.nan_to_num(pts[:, 2])
                prev = DepthMap(prior_z, np.nan_to_num(std), found & (prior_z > 0))
                curr = DepthMap(np.where(cloud.valid, cloud.xyz[:, 2], 0.0),
                                np.where(cloud.valid, cloud.depth_std, 0.0), cloud.valid)
                depth = scale_from_depth_ratio(prev, curr)
                overlap = depth.quality if depth.ok else 0.0
            scale = fuse_scales(ground, depth, cfg.scale.mode, overlap, cfg.scale.reinit_overlap)
            if not scale.ok:
                raise EstimationError('no usable scale', cause=scale.cause)
        except VOError as e:
            if prior is None or not len(prior):
                raise
            logger.info('Full pipeline failed; falling back to PnP', frame=result.frame, error=str(e))
            result.fusion_reason = 'full_pipeline_failed'
            return self._pnp_step(pm, prior, result), prior
        pose, cloud, _ = apply_scale(unit, scale.s, cloud)
        result.scale, result.scale_source = scale.s, scale.source.value
        if cfg.scale.mode == 'aerial' and plane.ok:
            self.camera_height = update_camera_height(plane.plane, scale.s)
        result.fusion = '8pt'
        if cfg.fusion.use_pnp and prior is not None and len(prior):
            pts, _, found = prior.lookup(pm.keys_prev)
            try:
                pnp = pnp_pose(pts[found], pm.matches.x_prime[found], self.K, cfg.fusion.pnp_threshold,
                               cfg.fusion.pnp_iters, cfg.seed)
            except VOError as e:
                logger.debug('PnP unavailable for fusion', frame=result.frame, error=str(e))
                pnp = None
            if pnp is not None and pnp.ok:
                fr = fuse_poses(pose, pnp.pose, scale.s, cfg.fusion.scale_gate, cfg.fusion.rotation_gate)
                pose = fr.pose
                result.fusion = 'fused' if fr.fused else '8pt'
                result.fusion_reason = fr.reason
        structure = KeyedStructure.from_cloud(keys, cloud)
        if prior is not None and len(prior):
            structure = prior.fuse(structure)
        return pose, structure

    def _pnp_step(self, pm: PairMatches, prior: KeyedStructure | None, result: FrameResult) -> PoseSE3:
        if prior is None or not len(prior):
            raise EstimationError('PnP needs structure from the previous frame', cause='no_structure')
        pts, _, found = prior.lookup(pm.keys_prev)
        pnp = pnp_pose(pts[found], pm.matches.x_prime[found], self.K, self.cfg.fusion.pnp_threshold,
                       self.cfg.fusion.pnp_iters, self.cfg.seed)
        if not pnp.ok:
            raise EstimationError('PnP failed', cause=pnp.cause)
        result.fusion = 'pnp'
        result.scale_source = 'pnp'
        result.scale = float(np.linalg.norm(pnp.pose.t))
        result.n_inliers = int(pnp.inliers.sum())
        return pnp.pose

    def decision_records(self) -> list[dict]:
        return [r.as_record() for r in self.results]


@dataclasses.dataclass(eq=False)
class SlamResult:
    odometry: list[PoseSE3]
    optimized: list[PoseSE3]
    graph: PoseGraph
    candidates: list[LoopCandidate]
    graph_result: GraphResult | None = None


def run_slam(pipeline: OdometryPipeline, image=None) -> SlamResult:
    '''
    Odometry (run first if needed), loop detection and verification, then pose-graph
    optimization. image(k) supplies frames for the similarity gate; without it the gate is
    skipped.
    '''
    cfg = pipeline.cfg
    if len(pipeline.trajectory) < pipeline.source.n_frames:
        pipeline.run()
    odometry = list(pipeline.trajectory)
    graph = PoseGraph(odometry)
    graph.add_odometry_chain(odometry_information(cfg.graph))
    if not cfg.loop.enabled:
        logger.info('Loop closure disabled')
        return SlamResult(odometry, odometry, graph, [])
    candidates = find_candidates(odometry, cfg.loop.radius, cfg.loop.min_index_gap, cfg.loop.stride)
    if image is not None:
        screened = gate_by_ssim(candidates, image, cfg.loop.ssim_threshold, cfg.loop.max_keep)
    else:
        logger.warning('No images for the similarity gate; passing all proximity candidates to verification')
        screened = [dataclasses.replace(c, status='ssim_pass') for c in candidates]
    final = []
    for cand in screened:
        if cand.status == 'ssim_pass':
            cand = verify_by_flow(cand, pipeline.source, pipeline.frame_structures.get(cand.i), pipeline.K, cfg)
            if cand.status == 'verified':
                graph.add_edge(cand.i, cand.j, cand.measurement, cand.info, EDGE_LOOP)
        final.append(cand)
    n_loops = len(graph.loop_edges)
    logger.info('Loop closure screening done', proposed=len(candidates), verified=n_loops)
    if n_loops == 0:
        return SlamResult(odometry, odometry, graph, final)
    res = pose_graph_optimize(graph, cfg.graph)
    return SlamResult(odometry, res.vertices, graph, final, res)
