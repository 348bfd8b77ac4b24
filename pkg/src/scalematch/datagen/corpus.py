"""Image corpora for pair generation: a directory of images, or procedurally
rendered textures when no photo collection is at hand."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from ..imaging import load_image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def load_corpus(directory: str | Path) -> list[np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"corpus directory {directory} does not exist")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise FileNotFoundError(f"corpus directory {directory} holds no images")
    return [load_image(p) for p in paths]


def _color(rng):
    return tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3))


STYLES = ("content", "background")


def _gradient(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xx + np.sin(angle) * yy
    t = (t - t.min()) / max(float(np.ptp(t)), 1e-6)
    c0, c1 = np.array(_color(rng)), np.array(_color(rng))
    img = (1 - t)[..., None] * c0 + t[..., None] * c1
    coarse = rng.normal(size=(6, 6, 3)).astype(np.float32)
    img += 0.15 * cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)
    return np.ascontiguousarray(img, dtype=np.float32)


def _draw_shape(img, rng, radius):
    size = img.shape[0]
    cx, cy = (int(v) for v in rng.integers(0, size, size=2))
    color = _color(rng)
    kind = rng.integers(0, 4)
    if kind == 0:
        cv2.circle(img, (cx, cy), max(1, int(radius)), color, -1, cv2.LINE_AA)
    elif kind == 1:
        dx, dy = (max(1, int(radius * v)) for v in rng.uniform(0.4, 1.0, size=2))
        cv2.rectangle(img, (cx - dx, cy - dy), (cx + dx, cy + dy), color, -1)
    elif kind == 2:
        pts = rng.normal(scale=radius, size=(3, 2)) + [cx, cy]
        cv2.fillPoly(img, [pts.astype(np.int32)], color, cv2.LINE_AA)
    else:
        end = (int(cx + rng.normal(scale=2 * radius)), int(cy + rng.normal(scale=2 * radius)))
        cv2.line(img, (cx, cy), end, color, max(1, int(radius / 3)), cv2.LINE_AA)


def render_texture_image(rng: np.random.Generator, size: int = 256, style: str = "content") -> np.ndarray:
    """Procedural stand-in for a photo.

    "content" images are densely covered with sharp shapes whose sizes stay
    within a narrow band, so their apparent size follows any rescaling.
    "background" images are smooth colour fields, which keeps a pasted
    content patch distinguishable from its surroundings.
    """
    if style not in STYLES:
        raise ValueError(f"unknown style {style!r}; expected one of {STYLES}")
    img = _gradient(rng, size)
    if style == "content":
        base = rng.uniform(0.04, 0.07) * size
        for _ in range(int(rng.integers(150, 250))):
            _draw_shape(img, rng, base * rng.uniform(0.6, 1.4))
        img += rng.normal(scale=0.02, size=img.shape).astype(np.float32)
        img = cv2.GaussianBlur(img, (0, 0), 0.5)
    else:
        img = cv2.GaussianBlur(img, (0, 0), 0.05 * size)
    return np.clip(img, 0.0, 1.0)


def synthetic_corpus(n: int, size: int = 256, seed: int = 0, style: str = "content") -> list[np.ndarray]:
    return [render_texture_image(np.random.default_rng([seed, i]), size, style) for i in range(n)]
