# SPDX-FileCopyrightText: 2025-present Oori Data <info@oori.dev>
# SPDX-License-Identifier: Apache-2.0
# mahalvo.harness
'''
Monte-Carlo comparisons on synthetic two-view scenes: refinement weighting schemes under
anisotropic noise, and minimal-set draws needed by weighted versus uniform sampling.
'''
import dataclasses

import numpy as np
import structlog

from mahalvo.epipolar import (MatchSet, decompose_essential, essential_from_fundamental, iterations_to_clean_sample,
                              normalized_eight_point, symmetric_epipolar_error, weighted_refine)
from mahalvo.errors import VOError
from mahalvo.synthetic import NoiseModel, TwoViewConfig, generate_two_view

logger = structlog.get_logger(__name__)


@dataclasses.dataclass
class WeightingStudy:
    seeds: list[int]
    errors: dict[str, np.ndarray]  # scheme -> per-seed median symmetric epipolar error (px^2)
    rotation_errors: dict[str, np.ndarray]  # scheme -> per-seed rotation error (deg), nan when undecomposable

    def median(self, scheme: str) -> float:
        return float(np.median(self.errors[scheme]))

    def median_rotation(self, scheme: str) -> float:
        return float(np.nanmedian(self.rotation_errors[scheme]))

    def win_rate(self, scheme: str, baseline: str) -> float:
        return float(np.mean(self.errors[scheme] < self.errors[baseline]))

    def rotation_margin(self, scheme: str, baseline: str) -> float:
        '''Relative reduction of the median rotation error of scheme against baseline'''
        base = self.median_rotation(baseline)
        return 1.0 - self.median_rotation(scheme) / base if base > 0 else 0.0

    def rotation_ordering_holds(self, margin: float = 0.10) -> bool:
        '''mahalanobis <= sampson <= none in median rotation error, and mahalanobis beats none by margin'''
        mahal, sampson, none = (self.median_rotation(s) for s in ('mahalanobis', 'sampson', 'none'))
        return mahal <= sampson <= none and self.rotation_margin('mahalanobis', 'none') >= margin


@dataclasses.dataclass
class SamplingStudy:
    seeds: list[int]
    draws: dict[str, np.ndarray]  # sampling scheme -> draws to the first all-inlier minimal set

    def median(self, scheme: str) -> float:
        return float(np.median(self.draws[scheme]))


def compare_weightings(seeds=range(200), schemes=('mahalanobis', 'sampson', 'none'), n_points: int = 60,
                       sigma_major: float = 2.0, sigma_minor: float = 0.4, iters: int = 5) -> WeightingStudy:
    '''
    Per seed: anisotropic noise with a random major axis per match, an unweighted eight-point
    start, then refinement under each scheme. Epipolar error is measured against the noiseless
    matches; rotation error is the angle between the decomposed and the true relative rotation.
    '''
    seeds = list(seeds)
    cfg = TwoViewConfig(n_points=n_points, noise=NoiseModel(sigma_major, sigma_minor))
    errors = {s: np.empty(len(seeds)) for s in schemes}
    rot_errors = {s: np.full(len(seeds), np.nan) for s in schemes}
    for k, seed in enumerate(seeds):
        sample = generate_two_view(cfg, seed)
        truth = MatchSet(sample.matches.x, sample.x_prime_true, sample.matches.info)
        F0 = normalized_eight_point(sample.matches)
        for scheme in schemes:
            refined = weighted_refine(F0, sample.matches, scheme, iters)
            errors[scheme][k] = np.median(symmetric_epipolar_error(refined.F, truth))
            try:
                E = essential_from_fundamental(refined.F, sample.intrinsics)
                est = decompose_essential(E, sample.matches, sample.intrinsics)
            except VOError:
                continue
            rot_errors[scheme][k] = np.degrees(est.angle_to(sample.pose))
    study = WeightingStudy(seeds, errors, rot_errors)
    logger.info('Weighting comparison done', seeds=len(seeds), **{s: study.median(s) for s in schemes},
                **{f'{s}_rot_deg': study.median_rotation(s) for s in schemes})
    return study


def compare_sampling(seeds=range(100), n_inliers: int = 70, n_outliers: int = 30,
                     sigma: float = 0.5) -> SamplingStudy:
    '''Draws until a clean minimal set, tight information on inliers and sentinel on outliers'''
    seeds = list(seeds)
    n = n_inliers + n_outliers
    cfg = TwoViewConfig(n_points=n, noise=NoiseModel(sigma, outlier_fraction=n_outliers / n))
    draws = {'multinomial': np.empty(len(seeds)), 'uniform': np.empty(len(seeds))}
    for k, seed in enumerate(seeds):
        sample = generate_two_view(cfg, seed)
        for scheme in draws:
            draws[scheme][k] = iterations_to_clean_sample(sample.is_inlier, sample.matches, scheme, seed)
    study = SamplingStudy(seeds, draws)
    logger.info('Sampling comparison done', seeds=len(seeds), multinomial=study.median('multinomial'),
                uniform=study.median('uniform'))
    return study
