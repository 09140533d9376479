# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# test/test_pipeline.py
import dataclasses

import numpy as np
import pytest

from mahalvo.config import PipelineConfig, ScaleConfig
from mahalvo.datasets import relative_translation_norms, scale_drift_report
from mahalvo.geometry import SENTINEL_EPS
from mahalvo.pipeline import OdometryPipeline, run_slam
from mahalvo.sources import TrackSource
from mahalvo.synthetic import TrajectoryConfig, generate_trajectory, mirrored_sequence


def pipeline_for(scene, cfg=None):
    source = TrackSource(scene.observations, scene.info, scene.intrinsics)
    return OdometryPipeline(source, scene.intrinsics, (scene.width, scene.height), cfg or PipelineConfig())


def decisions(pipe):
    return [(r.branch, r.fusion, r.scale_source) for r in pipe.results]


@pytest.fixture(scope='module')
def ground_scene():
    return generate_trajectory(TrajectoryConfig(profile='ground', n_frames=20), seed=1)


@pytest.fixture(scope='module')
def ground_run(ground_scene):
    pipe = pipeline_for(ground_scene)
    pipe.run()
    return pipe


def test_noiseless_ground_sequence(ground_scene, ground_run):
    assert ground_run.failed_frames == []
    assert len(ground_run.trajectory) == ground_scene.n_frames
    est = relative_translation_norms(ground_run.trajectory)
    truth = ground_scene.relative_translation_norms()
    assert np.median(np.abs(est / truth - 1)) < 1e-3
    path = truth.sum()
    assert np.linalg.norm(ground_run.trajectory[-1].t - ground_scene.trajectory[-1].t) < 0.01 * path
    for est_pose, true_pose in zip(ground_run.trajectory, ground_scene.trajectory):
        assert est_pose.angle_to(true_pose) < 1e-3


def test_decision_records(ground_run):
    records = ground_run.decision_records()
    assert [r['frame'] for r in records] == list(range(1, 20))
    first = records[0]
    assert first['ok'] and first['scale_source'] in ('ground_plane', 'fused')
    assert first['fusion'] == '8pt'
    for r in records:
        assert r['branch'] in ('FullPipeline', 'PnPOnly')
        assert r['fusion'] in ('8pt', 'fused', 'pnp')
        assert r['camera_height'] == pytest.approx(1.7)


def test_deterministic(ground_scene, ground_run):
    again = pipeline_for(ground_scene)
    again.run()
    for a, b in zip(ground_run.trajectory, again.trajectory):
        assert np.array_equal(a.matrix(), b.matrix())
    assert decisions(again) == decisions(ground_run)


def test_frames_in_order(ground_scene):
    pipe = pipeline_for(ground_scene)
    with pytest.raises(ValueError):
        pipe.step(2)


def test_failed_frames_carry_previous_pose(ground_scene):
    obs = ground_scene.observations[:5].copy()
    obs[3] = np.nan
    source = TrackSource(obs, ground_scene.info[:5], ground_scene.intrinsics)
    pipe = OdometryPipeline(source, ground_scene.intrinsics, (ground_scene.width, ground_scene.height))
    pipe.run()
    assert pipe.failed_frames == [3, 4]
    assert pipe.results[2].cause == 'too_few_matches'
    assert len(pipe.trajectory) == 5
    assert np.array_equal(pipe.trajectory[3].matrix(), pipe.trajectory[2].matrix())


AERIAL = dict(profile='aerial', n_frames=30, hover_start=10, hover_length=5)
AERIAL_CFG = PipelineConfig(scale=ScaleConfig(mode='aerial'))


def test_hover_takes_pnp_branch():
    scene = generate_trajectory(TrajectoryConfig(**AERIAL), seed=2)
    pipe = pipeline_for(scene, AERIAL_CFG)
    pipe.run()
    by_frame = {r.frame: r for r in pipe.results}
    for k in scene.hover_frames:
        assert by_frame[k].branch == 'PnPOnly'
        assert by_frame[k].fusion == 'pnp'
    assert by_frame[5].branch == 'FullPipeline'
    assert not pipe.failed_frames


def test_mirrored_scale_drift():
    scene = generate_trajectory(TrajectoryConfig(**AERIAL), seed=2)
    mirrored = mirrored_sequence(scene)
    pipe = pipeline_for(mirrored, AERIAL_CFG)
    pipe.run()
    report = scale_drift_report(pipe.trajectory)
    hover_steps = [k - 1 for k in scene.hover_frames]
    moving = np.setdiff1d(np.arange(len(report.scale_difference_pct)), hover_steps)
    assert abs(np.nanmean(report.scale_difference_pct[moving])) < 1.0
    pnp_frames = {r.frame for r in pipe.results if r.branch == 'PnPOnly'}
    assert set(scene.hover_frames) <= pnp_frames


@pytest.fixture(scope='module')
def loop_scene():
    cfg = TrajectoryConfig(profile='loop', n_frames=101, loop_radius=8.0, noise_sigma=0.5)
    return generate_trajectory(cfg, seed=5)


def test_slam_closes_loop(loop_scene):
    result = run_slam(pipeline_for(loop_scene))
    assert [(c.i, c.j, c.status) for c in result.candidates] == [(0, 100, 'verified')]
    assert result.candidates[0].branch == 'PnPOnly'
    assert len(result.graph.loop_edges) == 1
    before = np.linalg.norm(result.odometry[-1].t - loop_scene.trajectory[-1].t)
    after = np.linalg.norm(result.optimized[-1].t - loop_scene.trajectory[-1].t)
    assert after < before
    assert result.graph_result is not None


def test_slam_rejects_corrupted_revisit(loop_scene):
    pipe = pipeline_for(loop_scene)
    pipe.run()
    info = loop_scene.info.copy()
    info[100] = [SENTINEL_EPS, 0.0, SENTINEL_EPS]
    pipe.source = TrackSource(loop_scene.observations, info, loop_scene.intrinsics)
    result = run_slam(pipe)
    (cand,) = result.candidates
    assert cand.status == 'rejected' and cand.cause == 'reliability'
    assert result.optimized is result.odometry
    assert not result.graph.loop_edges


def test_slam_without_loops(ground_scene, ground_run):
    result = run_slam(ground_run)
    assert result.candidates == []
    assert result.optimized is result.odometry
    assert result.graph.has_odometry_chain()
    disabled = dataclasses.replace(PipelineConfig(), loop=dataclasses.replace(PipelineConfig().loop, enabled=False))
    pipe = pipeline_for(ground_scene, disabled)
    assert run_slam(pipe).candidates == []
