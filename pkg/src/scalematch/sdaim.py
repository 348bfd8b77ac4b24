"""Scale-difference-aware matching.

Estimate the scale ratio s of a pair, resize image1 by sqrt(s) and image2 by
1/sqrt(s) so that their covisible regions end up the same size, extract and
match local features on the resized pair, then map keypoints back to the
original frames.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np

from .imaging import MIN_SIDE, check_image, resize, round_half_up, to_gray_u8
from .network import LOG2_CLAMP, ScaleNet, ScaleRatio, estimate_scale_ratio


@dataclass
class Keypoints:
    """Keypoints in continuous coordinates (pixel centres at i + 0.5)."""

    xy: np.ndarray
    scores: np.ndarray
    descriptors: np.ndarray

    def __len__(self):
        return len(self.xy)

    @classmethod
    def empty(cls, dim: int = 128) -> "Keypoints":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, dim), dtype=np.float32))


@dataclass
class MatchSet:
    pairs: np.ndarray
    keypoints1: Keypoints
    keypoints2: Keypoints
    resize_factors: tuple[float, float] = (1.0, 1.0)
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0))
    estimator: str = "none"
    diagnostic: str = ""

    def __len__(self):
        return len(self.pairs)

    @property
    def xy1(self) -> np.ndarray:
        return self.keypoints1.xy[self.pairs[:, 0]] if len(self.pairs) else np.zeros((0, 2))

    @property
    def xy2(self) -> np.ndarray:
        return self.keypoints2.xy[self.pairs[:, 1]] if len(self.pairs) else np.zeros((0, 2))

    def swapped(self) -> "MatchSet":
        return MatchSet(
            self.pairs[:, ::-1].copy(), self.keypoints2, self.keypoints1,
            self.resize_factors[::-1], self.scores, self.estimator, self.diagnostic,
        )


# --------------------------------------------------------------------------
# features and matching


def mutual_nn_ratio(d1: np.ndarray, d2: np.ndarray, ratio: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """Mutual nearest neighbours that also pass the ratio test in both directions.

    Returns (M, 2) index pairs and a per-match score ``1 - worst ratio``.
    """
    if len(d1) == 0 or len(d2) == 0:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0)
    a, b = np.asarray(d1, dtype=np.float64), np.asarray(d2, dtype=np.float64)
    sq = (a**2).sum(1)[:, None] + (b**2).sum(1)[None, :] - 2.0 * a @ b.T
    dist = np.sqrt(np.maximum(sq, 0.0))
    nn12 = dist.argmin(axis=1)
    nn21 = dist.argmin(axis=0)
    idx1 = np.flatnonzero(nn21[nn12] == np.arange(len(a)))
    idx2 = nn12[idx1]
    best = dist[idx1, idx2]

    def second_best(mat, rows, cols):
        if mat.shape[1] < 2:
            return np.full(len(rows), np.inf)
        masked = mat[rows].copy()
        masked[np.arange(len(rows)), cols] = np.inf
        return masked.min(axis=1)

    ratio12 = best / np.maximum(second_best(dist, idx1, idx2), 1e-12)
    ratio21 = best / np.maximum(second_best(dist.T, idx2, idx1), 1e-12)
    worst = np.maximum(ratio12, ratio21)
    keep = worst < ratio
    pairs = np.stack([idx1[keep], idx2[keep]], axis=1).astype(np.int64)
    return pairs, 1.0 - worst[keep]


class MatcherAdapter:
    """Feature extractor + matcher pair.  Subclasses implement ``extract``."""

    extractor_id = "abstract"
    matcher_id = "mnn-ratio"

    def __init__(self, ratio_test_threshold: float = 0.8):
        self.ratio_test_threshold = ratio_test_threshold

    def extract(self, img: np.ndarray) -> Keypoints:
        raise NotImplementedError

    def match(self, desc1: np.ndarray, desc2: np.ndarray):
        return mutual_nn_ratio(desc1, desc2, self.ratio_test_threshold)


class SiftAdapter(MatcherAdapter):
    """Difference-of-Gaussians keypoints with gradient-histogram descriptors."""

    extractor_id = "sift"

    def __init__(self, max_keypoints: int = 2000, ratio_test_threshold: float = 0.8):
        super().__init__(ratio_test_threshold)
        self.max_keypoints = max_keypoints

    def extract(self, img: np.ndarray) -> Keypoints:
        # a fresh detector per call keeps the adapter stateless across threads
        sift = cv2.SIFT_create(nfeatures=self.max_keypoints)
        kps, desc = sift.detectAndCompute(to_gray_u8(img), None)
        if not kps:
            return Keypoints.empty()
        xy = np.array([kp.pt for kp in kps], dtype=np.float64) + 0.5
        scores = np.array([kp.response for kp in kps], dtype=np.float64)
        return Keypoints(xy, scores, desc.astype(np.float32))


# --------------------------------------------------------------------------
# resizing


def _as_log2(s) -> float:
    if isinstance(s, ScaleRatio):
        return s.log2_value
    if not s > 0:
        raise ValueError(f"scale ratio must be positive, got {s}")
    return math.log2(s)


def split_factors(s, paper_direction: bool = False) -> tuple[float, float]:
    """(r1, r2) with r1 / r2 = s; ``paper_direction`` swaps the roles."""
    half = 0.5 * _as_log2(s)
    if paper_direction:
        half = -half
    return 2.0**half, 2.0**-half


def resize_pair(i1: np.ndarray, i2: np.ndarray, s, paper_direction: bool = False, clamp: bool = True):
    """Resize both images by their split factors.

    Returns ``(i1_resized, i2_resized, r1, r2)``.  If a side would drop below
    32 px both factors are raised together (keeping r1 / r2) unless
    ``clamp`` is False, in which case a ValueError names the factor.
    """
    i1, i2 = check_image(i1), check_image(i2)
    if abs(_as_log2(s)) > LOG2_CLAMP:
        raise ValueError(f"scale ratio {s} outside [2^-{LOG2_CLAMP:g}, 2^{LOG2_CLAMP:g}]")
    r1, r2 = split_factors(s, paper_direction)
    smallest = min(min(i1.shape[:2]) * r1, min(i2.shape[:2]) * r2)
    if round_half_up(smallest) < MIN_SIDE:
        if not clamp:
            name, factor = ("r1", r1) if min(i1.shape[:2]) * r1 <= min(i2.shape[:2]) * r2 else ("r2", r2)
            raise ValueError(f"resize factor {name}={factor:.4g} shrinks an image below {MIN_SIDE}px")
        k = MIN_SIDE / smallest
        r1, r2 = r1 * k, r2 * k
    out1 = resize(i1, (round_half_up(i1.shape[0] * r1), round_half_up(i1.shape[1] * r1)))
    out2 = resize(i2, (round_half_up(i2.shape[0] * r2), round_half_up(i2.shape[1] * r2)))
    return out1, out2, r1, r2


def restore_keypoints(xy: np.ndarray, r) -> np.ndarray:
    """Map resized-frame coordinates back to the original frame.

    ``r`` is one factor or a per-axis pair ``(r_y, r_x)``.
    """
    if np.ndim(r) == 0:
        ry = rx = float(r)
    else:
        ry, rx = (float(v) for v in r)
    if ry <= 0 or rx <= 0:
        raise ValueError("resize factors must be positive")
    xy = np.asarray(xy, dtype=np.float64)
    return np.column_stack([xy[:, 0] / rx, xy[:, 1] / ry]) if len(xy) else xy.reshape(0, 2)


def _axis_factors(original: np.ndarray, resized: np.ndarray) -> tuple[float, float]:
    return resized.shape[0] / original.shape[0], resized.shape[1] / original.shape[1]


# --------------------------------------------------------------------------
# estimators


class UnitEstimator:
    name = "unit"

    def __call__(self, i1, i2) -> ScaleRatio:
        return ScaleRatio(0.0)


class FixedEstimator:
    """Returns a known ratio, e.g. the ground truth of a synthetic pair."""

    name = "ground-truth"

    def __init__(self, ratio):
        self.ratio = ScaleRatio(_as_log2(ratio))

    def __call__(self, i1, i2) -> ScaleRatio:
        return self.ratio


class NetworkEstimator:
    name = "network"

    def __init__(self, model: ScaleNet):
        self.model = model

    def __call__(self, i1, i2) -> ScaleRatio:
        return estimate_scale_ratio(i1, i2, self.model)


Estimator = Callable[[np.ndarray, np.ndarray], ScaleRatio]


# --------------------------------------------------------------------------
# pipelines


def _extract_and_match(img1, img2, adapter: MatcherAdapter) -> tuple[Keypoints, Keypoints, np.ndarray, np.ndarray, str]:
    kp1, kp2 = adapter.extract(img1), adapter.extract(img2)
    if len(kp1) == 0 or len(kp2) == 0:
        return kp1, kp2, np.zeros((0, 2), dtype=np.int64), np.zeros(0), (
            f"no keypoints (image1: {len(kp1)}, image2: {len(kp2)})"
        )
    pairs, scores = adapter.match(kp1.descriptors, kp2.descriptors)
    return kp1, kp2, pairs, scores, ""


def match_baseline(i1, i2, adapter: MatcherAdapter) -> MatchSet:
    i1, i2 = check_image(i1), check_image(i2)
    kp1, kp2, pairs, scores, diag = _extract_and_match(i1, i2, adapter)
    return MatchSet(pairs, kp1, kp2, (1.0, 1.0), scores, "none", diag)


def match_with_sdaim(
    i1, i2, estimator: Estimator, adapter: MatcherAdapter, paper_direction: bool = False
) -> MatchSet:
    i1, i2 = check_image(i1), check_image(i2)
    s = estimator(i1, i2)
    if not isinstance(s, ScaleRatio):
        s = ScaleRatio(_as_log2(s))
    s = s.clamped()
    r1_img, r2_img, r1, r2 = resize_pair(i1, i2, s, paper_direction)
    kp1, kp2, pairs, scores, diag = _extract_and_match(r1_img, r2_img, adapter)
    kp1 = Keypoints(restore_keypoints(kp1.xy, _axis_factors(i1, r1_img)), kp1.scores, kp1.descriptors)
    kp2 = Keypoints(restore_keypoints(kp2.xy, _axis_factors(i2, r2_img)), kp2.scores, kp2.descriptors)
    return MatchSet(pairs, kp1, kp2, (r1, r2), scores, getattr(estimator, "name", "custom"), diag)


def correct_mask(xy1: np.ndarray, xy2: np.ndarray, gt_warp, px_threshold: float) -> np.ndarray:
    """Matches whose image1 point, warped into image2, lands within the threshold."""
    if len(xy1) == 0:
        return np.zeros(0, dtype=bool)
    return np.linalg.norm(gt_warp(xy1) - xy2, axis=1) < px_threshold


def inlier_count(matches: MatchSet, record, px_threshold: float = 3.0) -> int:
    """Correct matches of a synthetic pair, judged at a common scale.

    The reprojection error in image2 is divided by sqrt(scale of the warp),
    i.e. measured in the frame where both covisible regions are equally large.
    """
    ax, ay = record.warp[0], record.warp[1]
    scale = math.sqrt(math.sqrt(ax * ay))
    return int(correct_mask(matches.xy1, matches.xy2, record.warp_points, px_threshold * scale).sum())


# --------------------------------------------------------------------------
# match dumps


def write_match_dump(matches: MatchSet, path: str | Path) -> None:
    r1, r2 = matches.resize_factors
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# r1={r1!r}\n# r2={r2!r}\n# estimator={matches.estimator}\n")
        fh.write(f"# n_keypoints1={len(matches.keypoints1)}\n# n_keypoints2={len(matches.keypoints2)}\n")
        if matches.diagnostic:
            fh.write(f"# diagnostic={matches.diagnostic}\n")
        fh.write("x1,y1,x2,y2,score\n")
        for (x1, y1), (x2, y2), sc in zip(matches.xy1, matches.xy2, matches.scores):
            values = (x1, y1, x2, y2, sc)
            fh.write(",".join(repr(float(v)) for v in values) + "\n")


def read_match_dump(path: str | Path) -> tuple[dict, np.ndarray]:
    """Header fields and the (M, 5) table of a match dump."""
    header, rows = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                header[key] = value
            elif line and not line.startswith("x1"):
                rows.append([float(v) for v in line.split(",")])
    return header, np.array(rows, dtype=np.float64).reshape(-1, 5)
