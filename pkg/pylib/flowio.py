# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.flowio
'''
Flow-field files and diagnostic images.

A flow file is a .npy array (H, W, 6) float32 holding [u, v, Yxx, Yxy, Yyy, valid].
'''
from pathlib import Path

import cv2
import numpy as np
import structlog

from mahalvo.errors import SequenceFormatError
from mahalvo.flow import FlowField
from mahalvo.geometry import info_min_eigenvalue

logger = structlog.get_logger(__name__)

FLOW_CHANNELS = 6


def write_flow(path, field: FlowField) -> Path:
    path = Path(path)
    packed = np.dstack([field.flow, field.info, field.valid.astype(float)]).astype(np.float32)
    np.save(path, packed, allow_pickle=False)
    logger.debug('Wrote flow file', path=str(path), shape=field.shape)
    return path


def read_flow(path) -> FlowField:
    path = Path(path)
    try:
        packed = np.load(path, allow_pickle=False)
    except ValueError as e:
        raise SequenceFormatError(f'Not a flow array: {e}', path=path)
    if packed.ndim != 3 or packed.shape[2] != FLOW_CHANNELS:
        raise SequenceFormatError(f'Flow file must be (H, W, {FLOW_CHANNELS}), got {packed.shape}', path=path)
    packed = packed.astype(np.float64)
    return FlowField(packed[..., 0:2], packed[..., 2:5], packed[..., 5] > 0.5)


def flow_to_color(field: FlowField, max_magnitude: float | None = None) -> np.ndarray:
    '''Hue encodes direction, value encodes magnitude; invalid pixels are black. BGR uint8.'''
    u, v = field.flow[..., 0].astype(np.float32), field.flow[..., 1].astype(np.float32)
    mag, ang = cv2.cartToPolar(u, v)
    if max_magnitude is None:
        max_magnitude = float(mag[field.valid].max()) if field.valid.any() else 1.0
    max_magnitude = max(max_magnitude, 1e-6)
    hsv = np.zeros(field.shape + (3,), dtype=np.uint8)
    hsv[..., 0] = (ang * 180 / np.pi / 2).astype(np.uint8)
    hsv[..., 1] = 255
    hsv[..., 2] = np.clip(mag / max_magnitude * 255, 0, 255).astype(np.uint8)
    hsv[~field.valid] = 0
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2BGR)


def info_to_gray(field: FlowField) -> np.ndarray:
    '''Log of the smallest information eigenvalue, stretched to uint8; brighter means more certain'''
    lam = np.log10(np.maximum(info_min_eigenvalue(field.info), 1e-6))
    out = np.clip((lam + 6.0) / 7.0 * 255, 0, 255).astype(np.uint8)
    out[~field.valid] = 0
    return out


def depth_to_color(depth: np.ndarray, valid: np.ndarray, max_depth: float | None = None) -> np.ndarray:
    '''Inverse-depth colour map (near is warm); invalid pixels black'''
    if max_depth is None:
        max_depth = float(depth[valid].max()) if valid.any() else 1.0
    inv = np.zeros(depth.shape, dtype=np.float64)
    ok = valid & (depth > 0)
    inv[ok] = np.clip(1.0 - depth[ok] / max(max_depth, 1e-9), 0, 1)
    color = cv2.applyColorMap((inv * 255).astype(np.uint8), cv2.COLORMAP_JET)
    color[~ok] = 0
    return color


def write_png(path, img: np.ndarray) -> Path:
    path = Path(path)
    if not cv2.imwrite(str(path), img):
        raise OSError(f'Unable to write image {path}')
    return path
