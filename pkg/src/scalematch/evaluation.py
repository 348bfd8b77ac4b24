"""Metrics: scale-ratio error, PCK, relative pose error and mAA, and curves of
accuracy or error against the scale difference of a pair."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import cv2
import numpy as np

from .network import ScaleRatio
from .sdaim import MatchSet, correct_mask

FAILED_POSE_DEG = 180.0


def _log2_all(values) -> np.ndarray:
    out = []
    for v in values:
        if isinstance(v, ScaleRatio):
            out.append(v.log2_value)
        elif v > 0:
            out.append(math.log2(v))
        else:
            raise ValueError(f"scale ratios must be positive, got {v}")
    return np.array(out, dtype=np.float64)


def avg_l1_discrepancy(gt: Sequence, pred: Sequence) -> float:
    """Mean |log2 s - log2 s_hat|."""
    if len(gt) != len(pred):
        raise ValueError(f"{len(gt)} ground-truth ratios but {len(pred)} predictions")
    if len(gt) == 0:
        raise ValueError("no ratios to compare")
    return float(np.mean(np.abs(_log2_all(gt) - _log2_all(pred))))


def scale_bin(ratio) -> int:
    """x such that ratio lies in (2^x, 2^(x+1)) or (2^-(x+1), 2^-x)."""
    return int(math.floor(abs(_log2_all([ratio])[0])))


def pck(matches: MatchSet, gt_warp: Callable[[np.ndarray], np.ndarray], n_keypoints: int,
        px_threshold: float = 3.0) -> float:
    """Correct matches over the number of interest points."""
    if n_keypoints <= 0:
        raise ValueError("n_keypoints must be positive")
    return float(correct_mask(matches.xy1, matches.xy2, gt_warp, px_threshold).sum()) / n_keypoints


# --------------------------------------------------------------------------
# relative pose


@dataclass(frozen=True)
class RansacConfig:
    reproj_threshold: float = 1.5
    confidence: float = 0.999
    max_iterations: int = 100_000

    def __post_init__(self):
        if self.reproj_threshold <= 0 or not 0 < self.confidence < 1 or self.max_iterations < 1:
            raise ValueError("invalid RANSAC configuration")


@dataclass(frozen=True)
class PoseError:
    rotation_error: float
    translation_error: float

    @property
    def fpe(self) -> float:
        return max(self.rotation_error, self.translation_error)


def _normalize(pts: np.ndarray, k: np.ndarray) -> np.ndarray:
    homog = np.column_stack([pts, np.ones(len(pts))])
    return np.linalg.solve(k, homog.T).T[:, :2]


def estimate_relative_pose_points(pts1, pts2, k1, k2, cfg: RansacConfig = RansacConfig()):
    """Essential-matrix RANSAC; returns (R, unit t) with x2 = R x1 + t, or None."""
    pts1, pts2 = np.asarray(pts1, dtype=np.float64), np.asarray(pts2, dtype=np.float64)
    if len(pts1) < 5 or len(pts1) != len(pts2):
        return None
    k1, k2 = np.asarray(k1, dtype=np.float64), np.asarray(k2, dtype=np.float64)
    n1, n2 = _normalize(pts1, k1), _normalize(pts2, k2)
    thresh = cfg.reproj_threshold / np.mean([k1[0, 0], k1[1, 1], k2[0, 0], k2[1, 1]])
    try:
        E, mask = cv2.findEssentialMat(
            n1, n2, np.eye(3), method=cv2.RANSAC, prob=cfg.confidence,
            threshold=thresh, maxIters=cfg.max_iterations,
        )
    except cv2.error:
        return None
    if E is None or E.shape[0] % 3:
        return None
    best, best_count = None, 0
    for cand in np.split(E, E.shape[0] // 3):
        count, R, t, _ = cv2.recoverPose(cand, n1, n2, np.eye(3), mask=mask.copy())
        if count > best_count:
            best, best_count = (R, t.ravel() / np.linalg.norm(t)), count
    return best


def estimate_relative_pose(matches: MatchSet, k1, k2, cfg: RansacConfig = RansacConfig()):
    return estimate_relative_pose_points(matches.xy1, matches.xy2, k1, k2, cfg)


def rotation_angle_deg(r_a: np.ndarray, r_b: np.ndarray) -> float:
    # chord-based angle: well conditioned near zero, unlike arccos of the trace
    chord = np.linalg.norm(np.asarray(r_a) - np.asarray(r_b)) / (2.0 * math.sqrt(2.0))
    return math.degrees(2.0 * math.asin(min(1.0, chord)))


def vector_angle_deg(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64).ravel(), np.asarray(b, dtype=np.float64).ravel()
    return math.degrees(math.atan2(np.linalg.norm(np.cross(a, b)), float(a @ b)))


def final_pose_error(est, gt) -> PoseError:
    """Rotation and translation-direction angles between two relative poses.

    ``est`` may be None (a failed estimate), which scores 180 degrees.
    """
    if est is None:
        return PoseError(FAILED_POSE_DEG, FAILED_POSE_DEG)
    (r_est, t_est), (r_gt, t_gt) = est, gt
    n_est, n_gt = np.linalg.norm(t_est), np.linalg.norm(t_gt)
    if n_est == 0 and n_gt == 0:
        t_err = 0.0
    elif n_est == 0 or n_gt == 0:
        raise ValueError("translation direction undefined for a zero-length translation")
    else:
        t_err = vector_angle_deg(t_est, t_gt)
    return PoseError(rotation_angle_deg(r_est, r_gt), t_err)


def accuracy_thresholds(max_threshold: float = 10.0) -> np.ndarray:
    if max_threshold < 1:
        raise ValueError("max_threshold must be at least one degree")
    return np.arange(1, int(math.floor(max_threshold)) + 1, dtype=np.float64)


def average_accuracy_curve(errors: Sequence[float], max_threshold: float = 10.0):
    """(thresholds, fraction of errors below each threshold)."""
    if len(errors) == 0:
        raise ValueError("no pose errors")
    errs = np.asarray(errors, dtype=np.float64)
    taus = accuracy_thresholds(max_threshold)
    return taus, (errs[None, :] < taus[:, None]).mean(axis=1)


def maa(errors: Sequence[float], max_threshold: float = 10.0) -> float:
    """Mean accuracy over the 1-degree thresholds up to ``max_threshold``."""
    _, acc = average_accuracy_curve(errors, max_threshold)
    return float(acc.mean())


def accuracy_vs_scale_curve(fpe: Sequence[float], gt_ratios: Sequence, fpe_threshold: float = 20.0):
    """{bin x: (accuracy, count)} with bins x = floor(|log2 s|)."""
    if len(fpe) != len(gt_ratios) or len(fpe) == 0:
        raise ValueError("need equally many, and at least one, errors and ratios")
    bins: dict[int, list[bool]] = {}
    for e, s in zip(fpe, gt_ratios):
        bins.setdefault(scale_bin(s), []).append(e < fpe_threshold)
    return {x: (float(np.mean(v)), len(v)) for x, v in sorted(bins.items())}


def error_vs_scale_curve(gt: Sequence, pred: Sequence):
    """{bin x: (avg L1 discrepancy, count)} with bins x = floor(|log2 s|)."""
    if len(gt) != len(pred) or len(gt) == 0:
        raise ValueError("need equally many, and at least one, ratios")
    lg, lp = _log2_all(gt), _log2_all(pred)
    bins: dict[int, list[float]] = {}
    for a, b in zip(lg, lp):
        bins.setdefault(int(math.floor(abs(a))), []).append(abs(a - b))
    return {x: (float(np.mean(v)), len(v)) for x, v in sorted(bins.items())}
