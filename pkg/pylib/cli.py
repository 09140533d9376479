# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.cli
'''
Batch command line: dense flow, odometry, SLAM, evaluation and synthetic sequence generation.

    mahalvo flow img_a.png img_b.png --out-dir flow_out
    mahalvo synth --profile loop --seed 3 --out-dir seq_loop
    mahalvo odometry seq_loop --source tracks --out-dir run1
    mahalvo slam seq_loop --source tracks --out-dir run2
    mahalvo eval run2/trajectory_optimized.txt seq_loop/poses.txt

Exit status: 0 success, 1 frames flagged during the run, 2 usage or I/O error.
'''
import functools
import json
import logging
import os
import sys
from pathlib import Path

import cv2
import fire
import numpy as np
import rich.traceback
import structlog
from rich.console import Console
from rich.table import Table

from mahalvo.config import PipelineConfig, apply_overrides, load_pipeline_config, write_resolved_config
from mahalvo.datasets import (Sequence, evaluate_trajectory, load_sequence, read_poses, scale_drift_report,
                              write_calibration, write_metrics, write_tracks, write_trajectory)
from mahalvo.errors import SequenceFormatError, VOError
from mahalvo.flow import compute_dense_flow
from mahalvo.flowio import depth_to_color, flow_to_color, info_to_gray, write_flow, write_png
from mahalvo.loopclosure import write_g2o
from mahalvo.pipeline import OdometryPipeline, run_slam
from mahalvo.sources import DenseFlowSource, TrackSource, bootstrap_fundamental
from mahalvo.synthetic import TrajectoryConfig, generate_trajectory, mirrored_sequence, render_frame

logger = structlog.get_logger(__name__)

EXIT_OK, EXIT_DEGRADED, EXIT_USAGE = 0, 1, 2


def setup_logging(classic_tracebacks: bool = False, log_level_str: str = 'INFO'):
    '''Configures structlog processors and rendering.'''
    console_renderer_kwargs = {'colors': sys.stderr.isatty()}
    if classic_tracebacks:
        console_renderer_kwargs['exception_formatter'] = structlog.dev.plain_traceback

    shared_processors = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_logger_name,
        structlog.stdlib.add_log_level,
        structlog.processors.TimeStamper(fmt='iso'),
    ]

    structlog.configure(
        processors=shared_processors + [
            structlog.stdlib.ProcessorFormatter.wrap_for_formatter,
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=True,
    )

    formatter = structlog.stdlib.ProcessorFormatter(
        processor=structlog.dev.ConsoleRenderer(**console_renderer_kwargs),
    )

    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(formatter)
    root_logger = logging.getLogger()
    for h in root_logger.handlers[:]:
        root_logger.removeHandler(h)
    root_logger.addHandler(handler)

    numeric_level = getattr(logging, log_level_str.upper(), None)
    if not isinstance(numeric_level, int):
        logging.warning(f"Invalid log level '{log_level_str}' provided. Defaulting to INFO.")
        numeric_level = logging.INFO
    root_logger.setLevel(numeric_level)


def effective_loglevel(loglevel: str | None) -> str:
    '''Priority: CLI > MAHALVO_LOGLEVEL > INFO'''
    return (loglevel or os.environ.get('MAHALVO_LOGLEVEL') or 'INFO').upper()


def _exits(fn):
    '''Run a command, mapping usage and I/O errors to exit status 2'''
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if kwargs.get('configure_logging', True):
            setup_logging(kwargs.get('classic_tracebacks', False), effective_loglevel(kwargs.get('loglevel')))
        try:
            return fn(*args, **kwargs)
        except VOError as e:
            logger.error(str(e), command=fn.__name__)
        except FileNotFoundError as e:
            logger.error(f'File not found: {e.filename or e}', command=fn.__name__)
        except (OSError, ValueError) as e:
            logger.error(f'{type(e).__name__}: {e}', command=fn.__name__)
        return EXIT_USAGE
    return wrapper


def _resolve_config(config: str | None, overrides: dict) -> PipelineConfig:
    return apply_overrides(load_pipeline_config(config), overrides)


def _read_image(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise SequenceFormatError('Image not found', path=path)
    img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if img is None:
        raise SequenceFormatError('Unreadable image', path=path)
    return img


def _out_dir(out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, records) -> Path:
    with path.open('w') as fp:
        for rec in records:
            fp.write(json.dumps(rec, sort_keys=True, default=_json_default) + '\n')
    return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f'Not JSON serializable: {type(obj).__name__}')


def _build_pipeline(seq: Sequence, cfg: PipelineConfig, source: str) -> OdometryPipeline:
    if source == 'images':
        if not seq.image_paths:
            raise SequenceFormatError('Sequence has no image_0 frames; try --source tracks', path=seq.root)
        src = DenseFlowSource(seq.image, seq.n_frames, seq.intrinsics, cfg.flow, cfg.seed)
    elif source == 'tracks':
        if seq.tracks is None:
            raise SequenceFormatError('Sequence has no tracks directory', path=seq.root)
        src = TrackSource(seq.tracks['observations'], seq.tracks['info'], seq.intrinsics,
                          cfg.flow.info_threshold, seq.image if seq.image_paths else None)
    else:
        raise ValueError(f'Unknown source {source!r}; expected images or tracks')
    return OdometryPipeline(src, seq.intrinsics, seq.image_size(), cfg)


def _dump_depth(pipeline: OdometryPipeline, out: Path) -> int:
    '''Per-frame depth and standard deviation as (H, W, 2) arrays plus a colour preview'''
    ddir = _out_dir(out / 'depth')
    W, H = pipeline.width, pipeline.height
    for k, structure in sorted(pipeline.frame_structures.items()):
        depth, std = np.zeros((H, W)), np.zeros((H, W))
        if len(structure):
            px, z = pipeline.K.project(structure.points)
            px = np.nan_to_num(px, nan=-1.0, posinf=-1.0, neginf=-1.0)
            u, v = np.rint(px[:, 0]).astype(int), np.rint(px[:, 1]).astype(int)
            ok = (z > 0) & (u >= 0) & (u < W) & (v >= 0) & (v < H)
            depth[v[ok], u[ok]] = z[ok]
            std[v[ok], u[ok]] = structure.std[ok]
        np.save(ddir / f'{k:06d}.npy', np.dstack([depth, std]).astype(np.float32), allow_pickle=False)
        write_png(ddir / f'{k:06d}.png', depth_to_color(depth, depth > 0))
    return len(pipeline.frame_structures)


def _maybe_evaluate(seq: Sequence, poses, out: Path, name: str):
    if seq.ground_truth is None or len(poses) != len(seq.ground_truth):
        return None
    metrics = evaluate_trajectory(poses, seq.ground_truth)
    write_metrics(out / name, metrics)
    logger.info('Trajectory metrics', **{k: v for k, v in metrics.as_dict().items() if k != 'per_length'})
    return metrics


def _overrides(config_seed, **section_values) -> dict:
    ov = {'seed': config_seed}
    ov.update({k.replace('__', '.'): v for k, v in section_values.items()})
    return ov


@_exits
def cmd_flow(image1: str, image2: str, out: str = 'flow_out', config: str = None,
             epipolar: bool = True, downscale: int = None, epipolar_gain: float = None,
             epipolar_trunc: float = None, smoothness: float = None, fit_threshold: float = None,
             seed: int = None, loglevel: str = None, classic_tracebacks: bool = False,
             configure_logging: bool = True) -> int:
    '''Dense flow with per-pixel information between two images'''
    img1, img2 = _read_image(image1), _read_image(image2)
    cfg = _resolve_config(config, _overrides(seed, flow__downscale=downscale, flow__epipolar_gain=epipolar_gain,
                                             flow__epipolar_truncation=epipolar_trunc,
                                             flow__smoothness=smoothness, flow__fit_threshold=fit_threshold))
    out = _out_dir(out)
    F = None
    if epipolar:
        F, _, _ = bootstrap_fundamental(img1, img2, cfg.flow.max_corners, cfg.seed)
        if F is None:
            logger.warning('No bootstrap fundamental matrix; computing flow without the epipolar term')
    field = compute_dense_flow(img1, img2, F, cfg.flow)
    write_flow(out / 'flow.npy', field)
    write_png(out / 'flow.png', flow_to_color(field))
    write_png(out / 'information.png', info_to_gray(field))
    write_resolved_config(cfg, out)
    logger.info('Flow written', out_dir=str(out), valid=float(field.valid.mean()), epipolar=F is not None)
    return EXIT_OK


def _run_overrides(seed, mode, height, no_pnp, downscale, epipolar_gain, epipolar_trunc, fit_threshold,
                   ransac_iters, ransac_threshold, weighting, sampling=None, **extra) -> dict:
    '''Flags shared by odometry and slam; None leaves the file or default value in place'''
    return _overrides(
        seed, scale__mode=mode, scale__camera_height=height, fusion__use_pnp=False if no_pnp else None,
        flow__downscale=downscale, flow__epipolar_gain=epipolar_gain, flow__epipolar_truncation=epipolar_trunc,
        flow__fit_threshold=fit_threshold, ransac__max_iters=ransac_iters,
        ransac__inlier_threshold=ransac_threshold, ransac__weighting=weighting, ransac__sampling=sampling,
        **extra)


@_exits
def cmd_odometry(sequence: str, out: str = 'odometry_out', config: str = None, source: str = 'images',
                 mode: str = None, height: float = None, no_pnp: bool = False, downscale: int = None,
                 epipolar_gain: float = None, epipolar_trunc: float = None, fit_threshold: float = None,
                 ransac_iters: int = None, ransac_threshold: float = None, weighting: str = None,
                 sampling: str = None, max_frames: int = None, dump_depth: bool = True, seed: int = None,
                 loglevel: str = None, classic_tracebacks: bool = False, configure_logging: bool = True) -> int:
    '''Frame-to-frame odometry over a sequence directory'''
    seq = load_sequence(sequence)
    cfg = _resolve_config(config, _run_overrides(seed, mode, height, no_pnp, downscale, epipolar_gain,
                                                 epipolar_trunc, fit_threshold, ransac_iters, ransac_threshold,
                                                 weighting, sampling))
    out = _out_dir(out)
    write_resolved_config(cfg, out)
    pipeline = _build_pipeline(seq, cfg, source)
    pipeline.run(max_frames)
    write_trajectory(out / 'trajectory.txt', pipeline.trajectory)
    _write_jsonl(out / 'decisions.jsonl', pipeline.decision_records())
    if dump_depth:
        _dump_depth(pipeline, out)
    _maybe_evaluate(seq, pipeline.trajectory, out, 'metrics.json')
    failed = pipeline.failed_frames
    if failed:
        logger.warning('Frames flagged during odometry', frames=failed)
        return EXIT_DEGRADED
    return EXIT_OK


@_exits
def cmd_slam(sequence: str, out: str = 'slam_out', config: str = None, source: str = 'images',
             mode: str = None, height: float = None, no_pnp: bool = False, no_loop_closure: bool = False,
             downscale: int = None, epipolar_gain: float = None, epipolar_trunc: float = None,
             fit_threshold: float = None, ransac_iters: int = None, ransac_threshold: float = None,
             ssim_threshold: float = None, reliability: float = None, radius: float = None,
             min_index_gap: int = None, stride: int = None, weighting: str = None, seed: int = None,
             loglevel: str = None, classic_tracebacks: bool = False, configure_logging: bool = True) -> int:
    '''Odometry, loop detection and verification, then pose-graph optimization'''
    seq = load_sequence(sequence)
    cfg = _resolve_config(config, _run_overrides(
        seed, mode, height, no_pnp, downscale, epipolar_gain, epipolar_trunc, fit_threshold, ransac_iters,
        ransac_threshold, weighting, loop__enabled=False if no_loop_closure else None,
        loop__ssim_threshold=ssim_threshold, loop__reliability=reliability, loop__radius=radius,
        loop__min_index_gap=min_index_gap, loop__stride=stride))
    out = _out_dir(out)
    write_resolved_config(cfg, out)
    pipeline = _build_pipeline(seq, cfg, source)
    result = run_slam(pipeline, seq.image if seq.image_paths else None)
    write_trajectory(out / 'trajectory_odometry.txt', result.odometry)
    write_trajectory(out / 'trajectory_optimized.txt', result.optimized)
    write_g2o(out / 'pose_graph.g2o', result.graph)
    _write_jsonl(out / 'decisions.jsonl', pipeline.decision_records())
    _write_jsonl(out / 'loop_candidates.jsonl', [c.as_record() for c in result.candidates])
    _maybe_evaluate(seq, result.odometry, out, 'metrics_odometry.json')
    _maybe_evaluate(seq, result.optimized, out, 'metrics_optimized.json')
    if result.graph_result is not None:
        logger.info('Pose graph optimized', status=result.graph_result.status,
                    iterations=result.graph_result.iterations, loops=len(result.graph.loop_edges))
    if pipeline.failed_frames:
        logger.warning('Frames flagged during odometry', frames=pipeline.failed_frames)
        return EXIT_DEGRADED
    return EXIT_OK


@_exits
def cmd_eval(estimate: str, ground_truth: str, out: str = None, step: int = 10, lengths: tuple = None,
             mirrored: bool = False, loglevel: str = None, classic_tracebacks: bool = False,
             configure_logging: bool = True) -> int:
    '''Segment drift metrics of an estimated trajectory against ground truth'''
    est, gt = read_poses(estimate), read_poses(ground_truth)
    kwargs = {'step': step}
    if lengths:
        kwargs['lengths'] = tuple(float(v) for v in lengths)
    metrics = evaluate_trajectory(est, gt, **kwargs)
    table = Table(title='Trajectory error')
    table.add_column('length')
    table.add_column('rotation (deg/m)', justify='right')
    table.add_column('translation (%)', justify='right')
    for length, (r, t) in metrics.per_length.items():
        table.add_row(str(length), f'{r:.6f}', f'{t:.4f}')
    table.add_row('all', f'{metrics.rotation_error:.6f}', f'{metrics.translation_error:.4f}')
    Console(stderr=True).print(table)
    report = metrics.as_dict()
    if mirrored:
        drift = scale_drift_report(est)
        pct = drift.scale_difference_pct[~drift.flagged]
        report['scale_difference_pct'] = drift.scale_difference_pct.tolist()
        report['scale_difference_mean_pct'] = float(pct.mean()) if pct.size else float('nan')
        logger.info('Mirrored scale drift', mean_pct=report['scale_difference_mean_pct'],
                    flagged=int(drift.flagged.sum()))
    if out:
        Path(out).write_text(json.dumps(report, indent=2, default=_json_default))
    return EXIT_OK


@_exits
def cmd_synth(profile: str = 'ground', out: str = 'synthetic_seq', seed: int = 0, n_frames: int = None,
              noise_sigma: float = None, outlier_fraction: float = None, render: bool = True,
              mirrored: bool = False, loglevel: str = None, classic_tracebacks: bool = False,
              configure_logging: bool = True) -> int:
    '''Generate a synthetic sequence directory with ground truth, tracks and (optionally) frames'''
    settings = {'profile': profile}
    for key, value in (('n_frames', n_frames), ('noise_sigma', noise_sigma), ('outlier_fraction', outlier_fraction)):
        if value is not None:
            settings[key] = value
    scene = generate_trajectory(TrajectoryConfig(**settings), seed)
    if mirrored:
        scene = mirrored_sequence(scene)
    out = _out_dir(out)
    write_calibration(out / 'calib.txt', scene.intrinsics)
    write_trajectory(out / 'poses.txt', scene.trajectory)
    write_tracks(out, scene.observations, scene.info, scene.outliers, scene.points)
    (out / 'scene.json').write_text(json.dumps({
        'profile': scene.profile, 'seed': seed, 'mirrored': mirrored, 'width': scene.width,
        'height': scene.height, 'hover_frames': scene.hover_frames,
        'camera_heights': scene.camera_heights.tolist()}, indent=2))
    if render:
        idir = _out_dir(out / 'image_0')
        for k in range(scene.n_frames):
            frame = np.clip(np.rint(render_frame(scene, k) * 255), 0, 255).astype(np.uint8)
            write_png(idir / f'{k:06d}.png', frame)
    logger.info('Synthetic sequence written', out_dir=str(out), frames=scene.n_frames, profile=profile,
                rendered=render)
    return EXIT_OK


def _shell(fn):
    '''Fire entry that turns a command's status into the process exit code'''
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        sys.exit(fn(*args, **kwargs))
    return wrapper


COMMANDS = {
    'flow': _shell(cmd_flow),
    'odometry': _shell(cmd_odometry),
    'slam': _shell(cmd_slam),
    'eval': _shell(cmd_eval),
    'synth': _shell(cmd_synth),
}


def main():
    rich.traceback.install(show_locals=False, extra_lines=1, word_wrap=True)
    fire.Fire(COMMANDS)


if __name__ == '__main__':
    main()
