"""Pair manifests: one JSON object per line.

Fields per record::

    path1, path2   image paths, relative to the manifest's directory
    gt_ratio       resizing image1 by this factor removes the scale difference
    provenance     "synthetic-down" | "synthetic-up" | "annotated"
    placement      generator metadata (m, paste offsets, sizes, crop offsets)
    warp           [ax, ay, bx, by]: image1 point (x, y) lands at
                   (ax*x + bx, ay*y + by) in image2; absent for annotated pairs
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

PROVENANCES = ("synthetic-down", "synthetic-up", "annotated")


@dataclass
class PairRecord:
    path1: str
    path2: str
    gt_ratio: float
    provenance: str
    placement: dict = field(default_factory=dict)
    warp: list[float] | None = None

    def __post_init__(self):
        if not self.gt_ratio > 0:
            raise ValueError(f"gt_ratio must be positive, got {self.gt_ratio}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")

    def warp_points(self, xy: np.ndarray) -> np.ndarray:
        """Map (N, 2) image1 coordinates into image2."""
        if self.warp is None:
            raise ValueError("record carries no ground-truth warp")
        ax, ay, bx, by = self.warp
        xy = np.asarray(xy, dtype=np.float64)
        return np.stack([ax * xy[:, 0] + bx, ay * xy[:, 1] + by], axis=1)

    def resolve(self, root: str | Path) -> tuple[Path, Path]:
        root = Path(root)
        return root / self.path1, root / self.path2


def write_manifest(records: list[PairRecord], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_manifest(path: str | Path) -> list[PairRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(PairRecord(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad manifest record ({exc})") from exc
    return records
