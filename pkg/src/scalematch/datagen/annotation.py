"""Ground-truth scale ratios from posed views with semi-dense depth.

Each view's depth samples are lifted to a world-frame point cloud.  A point of
one cloud counts as visible in the other view when its nearest neighbour in the
other cloud is closer than ``tau``; the ratio is V1 / V2 of those counts.

Depth tables are text files with a header row ``u,v,depth``.  A view file is a
JSON object with ``intrinsics`` (3x3), ``pose`` (4x4 world-to-camera),
``depth`` (path of the depth table, relative to the view file) and an optional
``image`` path.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from ..network import ScaleRatio

TAU_SPACING_FACTOR = 3.0


@dataclass
class CameraView:
    intrinsics: np.ndarray
    pose: np.ndarray
    depth: np.ndarray
    image: np.ndarray | None = None

    def __post_init__(self):
        self.intrinsics = np.asarray(self.intrinsics, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        self.depth = np.asarray(self.depth, dtype=np.float64).reshape(-1, 3)
        if self.intrinsics.shape != (3, 3) or self.pose.shape != (4, 4):
            raise ValueError("intrinsics must be 3x3 and pose 4x4")
        k = self.intrinsics
        if k[0, 0] <= 0 or k[1, 1] <= 0 or abs(np.linalg.det(k)) < 1e-12:
            raise ValueError("intrinsics must be invertible with positive focal lengths")
        if np.any(self.depth[:, 2] <= 0):
            raise ValueError("depth values must be positive")


def visible_point_cloud(view: CameraView) -> np.ndarray:
    """World-frame (N, 3) points of every depth sample of ``view``."""
    if len(view.depth) == 0:
        raise ValueError("depth map is empty")
    uv1 = np.column_stack([view.depth[:, :2], np.ones(len(view.depth))])
    rays = np.linalg.solve(view.intrinsics, uv1.T).T
    cam = rays * view.depth[:, 2:3]
    rot, trans = view.pose[:3, :3], view.pose[:3, 3]
    return (cam - trans) @ rot


def nearest_distances(src: np.ndarray, ref: np.ndarray) -> np.ndarray:
    """Exact distance from every ``src`` point to its nearest ``ref`` point."""
    src, ref = np.asarray(src, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if len(src) * len(ref) <= 4096:
        diff = src[:, None, :] - ref[None, :, :]
        return np.sqrt((diff**2).sum(-1)).min(axis=1)
    _, idx = cKDTree(ref).query(src, k=1)
    # recompute with the brute-force formula so thresholds agree bit for bit
    return np.sqrt(((src - ref[idx]) ** 2).sum(-1))


def default_tau(ref: np.ndarray) -> float:
    """Three times the median nearest-neighbour spacing inside ``ref``."""
    if len(ref) < 2:
        raise ValueError("need at least two points to measure spacing")
    d, _ = cKDTree(ref).query(ref, k=2)
    return TAU_SPACING_FACTOR * float(np.median(d[:, 1]))


def cross_visibility_count(p_src: np.ndarray, p_ref: np.ndarray, tau: float | None = None) -> int:
    if len(p_src) == 0 or len(p_ref) == 0:
        raise ValueError("point clouds must be nonempty")
    if tau is None:
        tau = default_tau(p_ref)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    return int(np.count_nonzero(nearest_distances(p_src, p_ref) < tau))


def annotate_scale_ratio(v1: CameraView, v2: CameraView, tau: float | None = None) -> ScaleRatio:
    p1, p2 = visible_point_cloud(v1), visible_point_cloud(v2)
    n1 = cross_visibility_count(p1, p2, tau)
    n2 = cross_visibility_count(p2, p1, tau)
    if n1 == 0 or n2 == 0:
        raise ValueError(f"views do not overlap (V1={n1}, V2={n2})")
    # log of the larger-over-smaller quotient, negated when needed: exact for
    # powers of two and exactly antisymmetric under swapping the views
    if n1 >= n2:
        return ScaleRatio(math.log2(n1 / n2))
    return ScaleRatio(-math.log2(n2 / n1))


def read_depth_table(path: str | Path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data.reshape(-1, 3)


def write_depth_table(depth: np.ndarray, path: str | Path) -> None:
    np.savetxt(path, np.asarray(depth).reshape(-1, 3), delimiter=",", header="u,v,depth",
               comments="", fmt="%.9g")


def load_camera_view(path: str | Path) -> CameraView:
    path = Path(path)
    data = json.loads(path.read_text())
    image = None
    if data.get("image"):
        from ..imaging import load_image

        image = load_image(path.parent / data["image"])
    return CameraView(
        intrinsics=np.array(data["intrinsics"]),
        pose=np.array(data["pose"]),
        depth=read_depth_table(path.parent / data["depth"]),
        image=image,
    )
