"""Losses, augmentation and the training loop.

Every pair is evaluated in both orders within one step: the network predicts
r = log2 of the ratio for (I1, I2) and r' for (I2, I1), and the two losses tie
r to log2 s and r' to -log2 s and to each other.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import cv2
import numpy as np
import torch

from .imaging import load_image
from .network import ScaleNet, prepare_input

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# losses


def _log2_positive(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    if bool((t <= 0).any()):
        raise ValueError("scale ratios must be positive")
    return torch.log2(t)


def dual_loss_log2(r: torch.Tensor, r_swapped: torch.Tensor, log_gt: torch.Tensor) -> torch.Tensor:
    return 0.5 * ((r - log_gt) ** 2 + (r_swapped + log_gt) ** 2).mean()


def consistent_loss_log2(r: torch.Tensor, r_swapped: torch.Tensor) -> torch.Tensor:
    return ((r + r_swapped) ** 2).mean()


def dual_loss(pred, pred_swapped, gt) -> torch.Tensor:
    """Batch mean of 1/2 [log2(pred/gt)^2 + log2(pred_swapped*gt)^2]."""
    return dual_loss_log2(_log2_positive(pred), _log2_positive(pred_swapped), _log2_positive(gt))


def consistent_loss(pred, pred_swapped) -> torch.Tensor:
    """Batch mean of (log2 pred + log2 pred_swapped)^2."""
    return consistent_loss_log2(_log2_positive(pred), _log2_positive(pred_swapped))


@dataclass(frozen=True)
class LossWeights:
    dual: float = 1.0
    consistent: float = 1.0

    def __post_init__(self):
        if self.dual < 0 or self.consistent < 0 or self.dual + self.consistent <= 0:
            raise ValueError("loss weights must be nonnegative with a positive sum")


def total_loss(ld, lc, w: LossWeights = LossWeights()):
    return w.dual * ld + w.consistent * lc


# --------------------------------------------------------------------------
# augmentation


def _is_convex(quad: np.ndarray) -> bool:
    edges = np.roll(quad, -1, axis=0) - quad
    nxt = np.roll(edges, -1, axis=0)
    cross = edges[:, 0] * nxt[:, 1] - edges[:, 1] * nxt[:, 0]
    return bool(np.all(cross > 0) or np.all(cross < 0))


def sample_perspective(width: float, height: float, magnitude: float, rng: np.random.Generator):
    """Random corner displacement within ``magnitude`` of the image size.

    Returns the 3x3 homography (continuous pixel coordinates), the source
    corners and the displaced corners.
    """
    if not 0.0 <= magnitude <= 0.1:
        raise ValueError(f"perspective magnitude {magnitude} outside [0, 0.1]")
    src = np.array([[0, 0], [width, 0], [width, height], [0, height]], dtype=np.float64)
    limit = magnitude * np.array([width, height])
    while True:
        dst = src + rng.uniform(-1.0, 1.0, size=(4, 2)) * limit
        if _is_convex(dst):
            break
    hom = cv2.getPerspectiveTransform(src.astype(np.float32), dst.astype(np.float32))
    return hom, src, dst


def random_perspective_augment(img: np.ndarray, magnitude: float = 0.05, rng_seed: int = 0) -> np.ndarray:
    if magnitude == 0:
        return img.copy()
    h, w = img.shape[:2]
    hom, _, _ = sample_perspective(w, h, magnitude, np.random.default_rng(rng_seed))
    # shift into OpenCV's integer-centred pixel convention
    shift = np.array([[1, 0, 0.5], [0, 1, 0.5], [0, 0, 1]])
    hom_cv = np.linalg.inv(shift) @ hom @ shift
    out = cv2.warpPerspective(
        np.ascontiguousarray(img, dtype=np.float32), hom_cv, (w, h),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT_101,
    )
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# configuration and data


@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 10
    batch_size: int = 8
    input_resolution: int = 160
    augment_magnitude: float = 0.05
    lambda_d: float = 1.0
    lambda_c: float = 1.0
    seed: int = 0
    encoder_id: str = "small-random"
    use_covisibility: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.input_resolution <= 0:
            raise ValueError("learning rate, batch size and resolution must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")
        if not 0.0 <= self.augment_magnitude <= 0.1:
            raise ValueError("augment_magnitude must lie in [0, 0.1]")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_d, self.lambda_c)


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def read_flat_config(path: str | Path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = parse_value(value)
    return out


def write_flat_config(values: dict, path: str | Path) -> None:
    lines = [f"{k} = {json.dumps(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def train_config_from(values: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown training keys: {sorted(unknown)}")
    return TrainConfig(**values)


@dataclass
class TrainSample:
    image1: np.ndarray | str | Path
    image2: np.ndarray | str | Path
    gt_ratio: float

    def __post_init__(self):
        if not 2.0**-9 <= self.gt_ratio <= 2.0**9:
            raise ValueError(f"gt_ratio {self.gt_ratio} outside [2^-9, 2^9]")

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        a = self.image1 if isinstance(self.image1, np.ndarray) else load_image(self.image1)
        b = self.image2 if isinstance(self.image2, np.ndarray) else load_image(self.image2)
        return a, b


def samples_from_manifest(path: str | Path) -> list[TrainSample]:
    from .datagen.manifest import read_manifest

    root = Path(path).parent
    return [TrainSample(*rec.resolve(root), rec.gt_ratio) for rec in read_manifest(path)]


def _batch_tensors(samples, indices, cfg: TrainConfig, epoch: int, augment: bool):
    x1, x2, lg = [], [], []
    for idx in indices:
        a, b = samples[idx].load()
        if augment and cfg.augment_magnitude > 0:
            a = random_perspective_augment(a, cfg.augment_magnitude, hash_seed(cfg.seed, epoch, idx, 1))
            b = random_perspective_augment(b, cfg.augment_magnitude, hash_seed(cfg.seed, epoch, idx, 2))
        x1.append(prepare_input(a, cfg.input_resolution))
        x2.append(prepare_input(b, cfg.input_resolution))
        lg.append(math.log2(samples[idx].gt_ratio))
    return torch.stack(x1), torch.stack(x2), torch.tensor(lg)


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


# --------------------------------------------------------------------------
# loop


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class HistoryRow:
    epoch: int
    step: int
    ld: float
    lc: float
    total: float


@dataclass
class TrainState:
    model: ScaleNet
    optimizer: torch.optim.Optimizer
    epochs_completed: int = 0
    history: list[HistoryRow] = field(default_factory=list)


def make_optimizer(model: ScaleNet, cfg: TrainConfig) -> torch.optim.Adam:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.learning_rate)


def batch_losses(model: ScaleNet, x1, x2, log_gt, weights: LossWeights):
    r, r_swapped = model.forward_dual(x1, x2)
    ld = dual_loss_log2(r, r_swapped, log_gt)
    lc = consistent_loss_log2(r, r_swapped)
    return ld, lc, total_loss(ld, lc, weights)


def train(
    model: ScaleNet,
    samples: Sequence[TrainSample],
    cfg: TrainConfig,
    state: TrainState | None = None,
    on_epoch_end: Callable[[TrainState], None] | None = None,
) -> TrainState:
    """Fit ``model`` for ``cfg.epochs`` epochs in total (resuming from ``state``)."""
    if state is None:
        state = TrainState(model, make_optimizer(model, cfg))
    weights = cfg.loss_weights
    model.train()
    for epoch in range(state.epochs_completed, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            indices = [int(i) for i in order[start : start + cfg.batch_size]]
            x1, x2, lg = _batch_tensors(samples, indices, cfg, epoch, augment=True)
            ld, lc, loss = batch_losses(model, x1, x2, lg, weights)
            if not torch.isfinite(loss):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch} step {step} (samples {indices})"
                )
            state.optimizer.zero_grad()
            loss.backward()
            state.optimizer.step()
            state.history.append(HistoryRow(epoch, step, ld.item(), lc.item(), loss.item()))
        state.epochs_completed = epoch + 1
        if state.history:
            recent = [h.total for h in state.history if h.epoch == epoch]
            log.info("epoch %d: mean loss %.4f over %d steps", epoch, np.mean(recent), len(recent))
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def evaluate_loss(model: ScaleNet, samples: Sequence[TrainSample], cfg: TrainConfig) -> float:
    """Mean total loss over ``samples`` without augmentation."""
    if not samples:
        raise ValueError("no samples to evaluate")
    model.eval()
    totals = []
    with torch.no_grad():
        for start in range(0, len(samples), cfg.batch_size):
            indices = list(range(start, min(start + cfg.batch_size, len(samples))))
            x1, x2, lg = _batch_tensors(samples, indices, cfg, 0, augment=False)
            dtype = next(model.parameters()).dtype
            _, _, loss = batch_losses(model, x1.to(dtype), x2.to(dtype), lg.to(dtype), cfg.loss_weights)
            totals.append(float(loss) * len(indices))
    model.train()
    return sum(totals) / len(samples)


def predict_log2(model: ScaleNet, samples: Sequence[TrainSample], batch_size: int = 8,
                 swapped: bool = False) -> np.ndarray:
    """Clamped log2 predictions for every sample (or its swapped order)."""
    from .network import LOG2_CLAMP

    res = model.input_resolution
    out = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(samples), batch_size):
            chunk = samples[start : start + batch_size]
            pairs = [s.load() for s in chunk]
            x1 = torch.stack([prepare_input(a, res) for a, _ in pairs])
            x2 = torch.stack([prepare_input(b, res) for _, b in pairs])
            if swapped:
                x1, x2 = x2, x1
            out.append(model(x1, x2).clamp(-LOG2_CLAMP, LOG2_CLAMP).numpy())
    model.train()
    return np.concatenate(out) if out else np.zeros(0)


def write_history(history: Sequence[HistoryRow], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,step,ld,lc,total\n")
        for row in history:
            fh.write(f"{row.epoch},{row.step},{row.ld!r},{row.lc!r},{row.total!r}\n")


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
