"""Scale-ratio network: multi-scale fused features, covisibility-weighted
correlation and a regressor that predicts log2 of the scale ratio.

Tensors are batch-first and channels-first.  A correlation volume between
feature maps of grid ``h x w`` has shape ``(N, h*w, h, w)``: channel
``k = w * ik + jk`` (0-based, row-major) holds the similarity of every
location of the first map with location ``(ik, jk)`` of the second.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .imaging import MIN_SIDE, check_image, fit_square, resize, resize_tensor, round_half_up

LOG2_CLAMP = 9.0
ENCODERS = ("small-random", "pretrained-deep")


@dataclass(frozen=True)
class ScaleRatio:
    """A positive scale ratio stored by its base-2 logarithm."""

    log2_value: float

    def __post_init__(self):
        if not math.isfinite(self.log2_value):
            raise ValueError(f"non-finite log2 scale ratio {self.log2_value}")

    @classmethod
    def from_value(cls, value: float) -> "ScaleRatio":
        if not value > 0:
            raise ValueError(f"scale ratio must be positive, got {value}")
        return cls(math.log2(value))

    @property
    def value(self) -> float:
        return 2.0 ** self.log2_value

    def clamped(self) -> "ScaleRatio":
        return ScaleRatio(min(max(self.log2_value, -LOG2_CLAMP), LOG2_CLAMP))

    def inverse(self) -> "ScaleRatio":
        return ScaleRatio(-self.log2_value)


@dataclass(frozen=True)
class EncoderConfig:
    encoder_id: str = "small-random"
    output_channels: int = 128
    downsampling_stride: int = 16

    def __post_init__(self):
        if self.encoder_id not in ENCODERS:
            raise ValueError(f"unknown encoder {self.encoder_id!r}; choose from {ENCODERS}")
        if self.output_channels < 8:
            raise ValueError("encoder needs at least 8 output channels")
        if self.downsampling_stride < 1:
            raise ValueError("downsampling stride must be positive")


# --------------------------------------------------------------------------
# pyramid and encoders


def pyramid_sizes(height: int, width: int) -> list[tuple[int, int]]:
    return [
        (2 * height, 2 * width),
        (height, width),
        (round_half_up(height / 2), round_half_up(width / 2)),
    ]


def build_three_level_pyramid(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Upsampled (x2), original and downsampled (x0.5) copies of ``img``."""
    img = check_image(img)
    up_size, _, down_size = pyramid_sizes(*img.shape[:2])
    if min(down_size) < MIN_SIDE:
        raise ValueError(f"downsampled level {down_size} is smaller than {MIN_SIDE}px")
    return resize(img, up_size), img.copy(), resize(img, down_size)


class SmallEncoder(nn.Module):
    """Strided conv stack trained from scratch: four stride-2 blocks.

    GroupNorm inside the blocks and an instance-normalized output keep the
    correlation values spread out at initialization; without them the
    random features are nearly parallel and the regressor sees an almost
    constant volume.
    """

    def __init__(self, out_channels: int = 128):
        super().__init__()
        widths = [3, 16, 32, 64]
        layers: list[nn.Module] = []
        for cin, cout in zip(widths, widths[1:]):
            layers += [nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GroupNorm(8, cout), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(widths[-1], out_channels, 3, stride=2, padding=1), nn.InstanceNorm2d(out_channels)]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class ResNetEncoder(nn.Module):
    """ImageNet ResNet-18 cut after its third stage; only the last block trains."""

    _MEAN = (0.485, 0.456, 0.406)
    _STD = (0.229, 0.224, 0.225)

    def __init__(self, pretrained: bool = True):
        super().__init__()
        from torchvision.models import ResNet18_Weights, resnet18

        net = resnet18(weights=ResNet18_Weights.IMAGENET1K_V1 if pretrained else None)
        self.body = nn.Sequential(
            net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2, net.layer3
        )
        for p in self.body.parameters():
            p.requires_grad_(False)
        for p in net.layer3[1].parameters():
            p.requires_grad_(True)
        self.register_buffer("mean", torch.tensor(self._MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(self._STD).view(1, 3, 1, 1), persistent=False)

    def forward(self, x):
        return self.body((x - self.mean) / self.std)


def make_encoder(cfg: EncoderConfig, pretrained: bool = True) -> nn.Module:
    if cfg.encoder_id == "small-random":
        if cfg.downsampling_stride != 16:
            raise ValueError("the small encoder has a fixed stride of 16")
        return SmallEncoder(cfg.output_channels)
    if cfg.output_channels != 256 or cfg.downsampling_stride != 16:
        raise ValueError("pretrained-deep encoder produces 256 channels at stride 16")
    return ResNetEncoder(pretrained=pretrained)


# --------------------------------------------------------------------------
# functional building blocks


def l2_normalize(x: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Normalize each location's channel vector of an (N, C, H, W) tensor.

    All-zero locations become the uniform unit vector.
    """
    norm = x.norm(dim=1, keepdim=True)
    dead = norm <= eps
    if bool(dead.any()):
        warnings.warn(f"{int(dead.sum())} zero feature vectors replaced by the uniform unit vector")
        uniform = torch.full_like(x, 1.0 / math.sqrt(x.shape[1]))
        return torch.where(dead, uniform, x / torch.where(dead, torch.ones_like(norm), norm))
    return x / norm


def extract_fused_features(
    img: torch.Tensor, encoder: nn.Module, weights: torch.Tensor
) -> torch.Tensor:
    """Weighted sum of encoder features over a 3-level pyramid, L2-normalized.

    ``img`` is (N, 3, H, W); ``weights`` holds the (up, original, down) level
    weights.  The output grid matches the encoder's grid for the original level.
    """
    height, width = img.shape[-2:]
    up_size, _, down_size = pyramid_sizes(height, width)
    f_orig = encoder(img)
    grid = tuple(f_orig.shape[-2:])
    f_hr = resize_tensor(encoder(resize_tensor(img, up_size)), grid)
    f_lr = resize_tensor(encoder(resize_tensor(img, down_size)), grid)
    return l2_normalize(weights[0] * f_hr + weights[1] * f_orig + weights[2] * f_lr)


def compute_correlation_map(f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
    """All-pairs inner products: out[n, w*ik + jk, i, j] = <f1[n,:,i,j], f2[n,:,ik,jk]>."""
    if f1.shape != f2.shape:
        raise ValueError(f"feature maps differ in shape: {tuple(f1.shape)} vs {tuple(f2.shape)}")
    n, c, h, w = f1.shape
    return torch.einsum("nck,ncij->nkij", f2.reshape(n, c, h * w), f1)


def index_of(ik: int, jk: int, width: int) -> int:
    return width * ik + jk


def location_of(k: int, width: int) -> tuple[int, int]:
    return divmod(k, width)


def channel_max(corr: torch.Tensor) -> torch.Tensor:
    """Best similarity of each first-image location: (N, 1, h, w)."""
    return corr.amax(dim=1, keepdim=True)


def spatial_max(corr: torch.Tensor) -> torch.Tensor:
    """Best similarity of each second-image location, laid out on its grid."""
    n, k, h, w = corr.shape
    return corr.amax(dim=(2, 3)).reshape(n, 1, h, w)


class AttentionParams(nn.Module):
    """The two 5x5 single-channel filters (with bias) of the covisibility branches."""

    def __init__(self):
        super().__init__()
        self.cab1 = nn.Conv2d(1, 1, 5, padding=2)
        self.cab2 = nn.Conv2d(1, 1, 5, padding=2)
        with torch.no_grad():
            for conv in (self.cab1, self.cab2):
                conv.weight.zero_()
                conv.weight[0, 0, 2, 2] = 1.0
                conv.bias.zero_()


def covisibility_masks(corr: torch.Tensor, params: AttentionParams) -> tuple[torch.Tensor, torch.Tensor]:
    """Soft covisibility masks of both images, each (N, 1, h, w)."""
    m1 = torch.sigmoid(params.cab1(channel_max(corr)))
    m2 = torch.sigmoid(params.cab2(spatial_max(corr)))
    return m1, m2


def apply_covisibility(corr: torch.Tensor, m1: torch.Tensor, m2: torch.Tensor) -> torch.Tensor:
    n, k = corr.shape[:2]
    return m2.reshape(n, k, 1, 1) * (m1 * corr)


class Regressor(nn.Module):
    """Correlation volume -> raw log2 scale ratio."""

    def __init__(self, num_channels: int, width: int = 64):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(num_channels, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(width, width, 3, stride=2, padding=1),
            nn.ReLU(inplace=True),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(width, width),
            nn.ReLU(inplace=True),
        )
        self.out = nn.Linear(width, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, corr):
        r = self.out(self.features(corr)).squeeze(-1)
        if not bool(torch.isfinite(r).all()):
            raise FloatingPointError("regressor produced a non-finite activation")
        return r


def regress_scale_ratio(corr_cr: torch.Tensor, regressor: Regressor) -> list[ScaleRatio]:
    """Clamped scale ratios for every pair in the batch."""
    with torch.no_grad():
        r = regressor(corr_cr)
    return [ScaleRatio(float(v)).clamped() for v in r]


# --------------------------------------------------------------------------
# the model


class ScaleNet(nn.Module):
    def __init__(
        self,
        encoder: EncoderConfig | None = None,
        input_resolution: int = 160,
        use_covisibility: bool = True,
        pretrained: bool = True,
    ):
        super().__init__()
        self.encoder_config = encoder or EncoderConfig()
        stride = self.encoder_config.downsampling_stride
        if input_resolution % (2 * stride):
            raise ValueError(
                f"input resolution {input_resolution} must be divisible by {2 * stride} "
                "so every pyramid level maps onto the feature grid"
            )
        self.input_resolution = input_resolution
        self.use_covisibility = use_covisibility
        self.encoder = make_encoder(self.encoder_config, pretrained=pretrained)
        self.fusion_weights = nn.Parameter(torch.full((3,), 1.0 / 3.0))
        self.attention = AttentionParams()
        grid = input_resolution // stride
        self.regressor = Regressor(grid * grid)

    @property
    def grid_size(self) -> int:
        return self.input_resolution // self.encoder_config.downsampling_stride

    def features(self, img: torch.Tensor) -> torch.Tensor:
        return extract_fused_features(img, self.encoder, self.fusion_weights)

    def reinforced_correlation(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        corr = compute_correlation_map(f1, f2)
        if not self.use_covisibility:
            return corr
        m1, m2 = covisibility_masks(corr, self.attention)
        return apply_covisibility(corr, m1, m2)

    def head(self, f1: torch.Tensor, f2: torch.Tensor) -> torch.Tensor:
        """Raw (unclamped) log2 ratio from two fused feature maps."""
        return self.regressor(self.reinforced_correlation(f1, f2))

    def forward(self, img1: torch.Tensor, img2: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(img1), self.features(img2))

    def forward_dual(self, img1: torch.Tensor, img2: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Raw log2 predictions for (img1, img2) and the swapped order, sharing features."""
        f1, f2 = self.features(img1), self.features(img2)
        return self.head(f1, f2), self.head(f2, f1)


def prepare_input(img: np.ndarray, resolution: int) -> torch.Tensor:
    img = check_image(img)
    if img.shape[:2] != (resolution, resolution):
        img, _ = fit_square(img, resolution)
    return torch.from_numpy(np.ascontiguousarray(img)).permute(2, 0, 1)


def estimate_scale_ratio(i1: np.ndarray, i2: np.ndarray, model: ScaleNet) -> ScaleRatio:
    """Scale ratio s such that resizing ``i1`` by s removes its scale difference to ``i2``."""
    res = model.input_resolution
    x1, x2 = prepare_input(i1, res)[None], prepare_input(i2, res)[None]
    dtype = next(model.parameters()).dtype
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            r = model(x1.to(dtype), x2.to(dtype))
    finally:
        model.train(was_training)
    return ScaleRatio(float(r[0])).clamped()
