# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo
'''
Uncertainty-aware monocular visual odometry: dense flow with per-pixel information
matrices, Mahalanobis-weighted eight-point estimation, scale recovery, PnP fusion,
loop closure and pose-graph optimization.
'''
from mahalvo.__about__ import __version__  # noqa: F401
