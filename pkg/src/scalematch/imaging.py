"""Image helpers shared by the network, the data generators and the matcher.

Images are float arrays of shape (H, W, 3) with intensities in [0, 1].
Continuous pixel coordinates put the centre of pixel ``i`` at ``i + 0.5``, so
scaling an image by ``r`` maps a coordinate ``x`` to ``x * r`` exactly.
"""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image as PILImage

MIN_SIDE = 32


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def scaled_size(height: int, width: int, factor: float) -> tuple[int, int]:
    return round_half_up(height * factor), round_half_up(width * factor)


def check_image(img: np.ndarray, min_side: int = MIN_SIDE) -> np.ndarray:
    """Validate an (H, W, 3) image and return it as float32."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {img.shape}")
    if img.shape[0] < min_side or img.shape[1] < min_side:
        raise ValueError(f"image {img.shape[0]}x{img.shape[1]} is smaller than {min_side}px")
    img = img.astype(np.float32, copy=False)
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite intensities")
    if img.min() < 0.0 or img.max() > 1.0:
        raise ValueError("image intensities must lie in [0, 1]")
    return img


def resize_tensor(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of an (N, C, H, W) tensor, antialiased when shrinking."""
    if tuple(x.shape[-2:]) == tuple(size):
        return x
    shrink = size[0] < x.shape[-2] or size[1] < x.shape[-1]
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=shrink)


def resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize an (H, W, 3) image to ``size = (height, width)``."""
    if img.shape[:2] == tuple(size):
        return img.copy()
    t = torch.from_numpy(np.ascontiguousarray(img, dtype=np.float32)).permute(2, 0, 1)[None]
    out = resize_tensor(t, size)[0].permute(1, 2, 0).numpy()
    return np.clip(out, 0.0, 1.0)


def rescale(img: np.ndarray, factor: float) -> np.ndarray:
    return resize(img, scaled_size(img.shape[0], img.shape[1], factor))


def fit_square(img: np.ndarray, side: int) -> tuple[np.ndarray, float]:
    """Scale the longer side to ``side`` and zero-pad to a square.

    Returns the padded image and the applied scale factor.
    """
    h, w = img.shape[:2]
    factor = side / max(h, w)
    nh, nw = min(side, round_half_up(h * factor)), min(side, round_half_up(w * factor))
    out = np.zeros((side, side, 3), dtype=np.float32)
    out[:nh, :nw] = resize(img, (nh, nw))
    return out, factor


def load_image(path: str | Path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def save_image(img: np.ndarray, path: str | Path) -> None:
    arr = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def to_gray_u8(img: np.ndarray) -> np.ndarray:
    gray = img @ np.array([0.299, 0.587, 0.114], dtype=np.float32)
    return np.clip(np.round(gray * 255.0), 0, 255).astype(np.uint8)
