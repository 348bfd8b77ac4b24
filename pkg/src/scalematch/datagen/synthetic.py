"""Synthetic image pairs with a known scale ratio.

A content image is pasted into two different backgrounds.  In a "down" pair
one copy is shrunk by 2**-m; in an "up" pair one copy is a centre crop of the
content magnified by 2**m.  Pairs are stored so that image1 is the side whose
covisible region is smaller, hence ``gt_ratio = 2**m >= 1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from ..imaging import resize, round_half_up, save_image, scaled_size
from .manifest import PairRecord, write_manifest

M_MAX = 7.0


@dataclass
class SyntheticPair:
    image1: np.ndarray
    image2: np.ndarray
    gt_ratio: float
    provenance: str
    placement: dict = field(default_factory=dict)
    warp: list[float] = field(default_factory=list)


def _check_inputs(content, bg1, bg2, m):
    if not 0.0 <= m <= M_MAX:
        raise ValueError(f"m={m} outside [0, {M_MAX}]")
    if bg1.shape != bg2.shape:
        raise ValueError("backgrounds must share one resolution")
    if content.shape[0] > bg1.shape[0] or content.shape[1] > bg1.shape[1]:
        raise ValueError(
            f"content {content.shape[:2]} does not fit the {bg1.shape[:2]} background"
        )


def _paste(bg, patch, rng):
    oy = int(rng.integers(0, bg.shape[0] - patch.shape[0] + 1))
    ox = int(rng.integers(0, bg.shape[1] - patch.shape[1] + 1))
    out = bg.astype(np.float32, copy=True)
    out[oy : oy + patch.shape[0], ox : ox + patch.shape[1]] = patch
    return out, oy, ox


def make_pair_downsample(content, bg1, bg2, m: float, rng_seed: int) -> SyntheticPair:
    """image1 = bg2 holding the content shrunk by 2**-m, image2 = bg1 holding it as is."""
    _check_inputs(content, bg1, bg2, m)
    h, w = content.shape[:2]
    hs, ws = (max(1, v) for v in scaled_size(h, w, 2.0**-m))
    small = resize(content, (hs, ws))
    rng = np.random.default_rng(rng_seed)
    big_img, oy, ox = _paste(bg1, content, rng)
    small_img, sy, sx = _paste(bg2, small, rng)
    ax, ay = w / ws, h / hs
    return SyntheticPair(
        image1=small_img,
        image2=big_img,
        gt_ratio=2.0**m,
        provenance="synthetic-down",
        placement={
            "m": m,
            "content_size": [h, w],
            "scaled_size": [hs, ws],
            "offset1": [sy, sx],
            "offset2": [oy, ox],
            "overlap1": [sy, sx, hs, ws],
            "overlap2": [oy, ox, h, w],
        },
        warp=[ax, ay, ox - sx * ax, oy - sy * ay],
    )


def zoom_center_crop(content: np.ndarray, m: float) -> tuple[np.ndarray, tuple[int, int], tuple[float, float]]:
    """Centre crop, at the content's own size, of the content magnified by 2**m.

    Samples only the cropped window, so large m never materialises the full
    magnified image.  Returns the crop, the crop offset inside the magnified
    image and the per-axis magnification.
    """
    h, w = content.shape[:2]
    hz, wz = scaled_size(h, w, 2.0**m)
    cy, cx = (hz - h) // 2, (wz - w) // 2
    zy, zx = hz / h, wz / w
    if (hz, wz) == (h, w):
        return content.astype(np.float32, copy=True), (0, 0), (1.0, 1.0)
    # source coordinate of each crop pixel centre, in the centre-at-i+0.5 convention
    xs = (np.arange(w) + 0.5 + cx) / zx
    ys = (np.arange(h) + 0.5 + cy) / zy
    grid = np.stack(np.meshgrid(xs / w * 2 - 1, ys / h * 2 - 1), axis=-1)
    src = torch.from_numpy(np.ascontiguousarray(content, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.grid_sample(
        src, torch.from_numpy(grid[None].astype(np.float32)),
        mode="bilinear", padding_mode="border", align_corners=False,
    )
    return np.clip(out[0].permute(1, 2, 0).numpy(), 0, 1), (cy, cx), (zy, zx)


def make_pair_upsample(content, bg1, bg2, m: float, rng_seed: int) -> SyntheticPair:
    """image1 = bg1 holding the content, image2 = bg2 holding its magnified centre crop."""
    _check_inputs(content, bg1, bg2, m)
    h, w = content.shape[:2]
    crop, (cy, cx), (zy, zx) = zoom_center_crop(content, m)
    rng = np.random.default_rng(rng_seed)
    img1, oy, ox = _paste(bg1, content, rng)
    img2, py, px = _paste(bg2, crop, rng)
    return SyntheticPair(
        image1=img1,
        image2=img2,
        gt_ratio=2.0**m,
        provenance="synthetic-up",
        placement={
            "m": m,
            "content_size": [h, w],
            "crop_offset": [cy, cx],
            "offset1": [oy, ox],
            "offset2": [py, px],
            "overlap1": [oy + cy / zy, ox + cx / zx, h / zy, w / zx],
            "overlap2": [py, px, h, w],
        },
        warp=[zx, zy, px - cx - ox * zx, py - cy - oy * zy],
    )


def _random_square(img: np.ndarray, side: int, rng: np.random.Generator, min_frac: float) -> np.ndarray:
    short = min(img.shape[:2])
    crop = int(rng.integers(max(1, int(min_frac * short)), short + 1))
    y = int(rng.integers(0, img.shape[0] - crop + 1))
    x = int(rng.integers(0, img.shape[1] - crop + 1))
    return resize(img[y : y + crop, x : x + crop], (side, side))


def generate_pairs(
    content_corpus: Sequence[np.ndarray],
    bg_corpus: Sequence[np.ndarray],
    n: int,
    m_range: tuple[float, float] = (0.0, M_MAX),
    rng_seed: int = 0,
    resolution: int = 160,
    content_fraction: tuple[float, float] = (0.6, 0.9),
):
    """Yield ``n`` synthetic pairs; even indices are "down" pairs, odd are "up"."""
    if not content_corpus or not bg_corpus:
        raise ValueError("content and background corpora must be nonempty")
    lo, hi = m_range
    if not 0.0 <= lo <= hi <= M_MAX:
        raise ValueError(f"m_range {m_range} must lie within [0, {M_MAX}]")
    for i in range(n):
        rng = np.random.default_rng([rng_seed, i])
        m = float(rng.uniform(lo, hi))
        content_src = content_corpus[int(rng.integers(len(content_corpus)))]
        b1, b2 = rng.choice(len(bg_corpus), size=2, replace=len(bg_corpus) < 2)
        bg1 = _random_square(bg_corpus[int(b1)], resolution, rng, 0.5)
        bg2 = _random_square(bg_corpus[int(b2)], resolution, rng, 0.5)
        side = round_half_up(resolution * rng.uniform(*content_fraction))
        content = _random_square(content_src, side, rng, 0.6)
        make = make_pair_downsample if i % 2 == 0 else make_pair_upsample
        yield make(content, bg1, bg2, m, int(rng.integers(2**31)))


def generate_dataset(
    content_corpus: Sequence[np.ndarray],
    bg_corpus: Sequence[np.ndarray],
    n: int,
    m_range: tuple[float, float] = (0.0, M_MAX),
    rng_seed: int = 0,
    out_dir: str | Path = ".",
    resolution: int = 160,
    content_fraction: tuple[float, float] = (0.6, 0.9),
) -> list[PairRecord]:
    """Render pairs to ``out_dir`` and write ``out_dir/manifest.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    pairs = generate_pairs(
        content_corpus, bg_corpus, n, m_range, rng_seed, resolution, content_fraction
    )
    for i, pair in enumerate(pairs):
        name1, name2 = f"{i:06d}_1.png", f"{i:06d}_2.png"
        save_image(pair.image1, out_dir / name1)
        save_image(pair.image2, out_dir / name2)
        records.append(
            PairRecord(name1, name2, pair.gt_ratio, pair.provenance, pair.placement, pair.warp)
        )
    write_manifest(records, out_dir / "manifest.jsonl")
    return records


def overlap_areas(placement: dict) -> tuple[float, float]:
    """Pixel areas of the covisible rectangles in image1 and image2."""
    a1 = placement["overlap1"][2] * placement["overlap1"][3]
    a2 = placement["overlap2"][2] * placement["overlap2"][3]
    return a1, a2

