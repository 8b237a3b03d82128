"""U-Net block and the three networks built on it.

Layout is NCHW throughout. Every convolution except the final output
projection is followed by instance normalization and LeakyReLU; up-sampling
is nearest-neighbour x2 followed by a 3x3 stride-1 convolution.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ContractError

FEATURE_DIM = 64
INSTCOLOUR_CHANNELS = FEATURE_DIM + 2


@dataclass(frozen=True)
class UNetConfig:
    input_size: int = 32
    levels: int = 4
    base_channels: int = 32
    output_channels: int = 1
    encoder_dim: int = 512
    in_channels: int = 3
    convs_per_level: int = 1
    negative_slope: float = 0.2
    padding_mode: str = "zeros"  # inner layers; the input layer always replicates edges

    def __post_init__(self):
        if self.levels < 1:
            raise ContractError("levels must be >= 1")
        if self.input_size % (2 ** self.levels):
            raise ContractError(f"input_size {self.input_size} not divisible by 2**{self.levels}")
        if self.output_channels < 1:
            raise ContractError("output_channels must be >= 1")

    def widths(self) -> list[int]:
        """Channel width per resolution level; the last entry is the bottleneck."""
        ws = [min(self.base_channels * 2 ** l, self.encoder_dim) for l in range(self.levels)]
        return ws + [self.encoder_dim]

    def to_dict(self) -> dict:
        return asdict(self)


class _InstanceNorm(nn.Module):
    """Instance norm with learned affine; a 1x1 map has no spatial statistics and passes through."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        if x.shape[-1] * x.shape[-2] > 1:
            # one group per channel is exactly instance norm, and faster on CPU
            x = F.group_norm(x, x.shape[1], eps=1e-5)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


def _conv_block(cin: int, cout: int, slope: float, stride: int = 1, padding_mode: str = "replicate") -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, padding_mode=padding_mode),
        _InstanceNorm(cout),
        nn.LeakyReLU(slope),
    )


class UNet(nn.Module):
    """Returns ``(decoder_output (N, C, H, W), encoder_output (N, encoder_dim))``."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        ws = config.widths()

        def block(cin, cout, stride=1):
            return _conv_block(cin, cout, config.negative_slope, stride, config.padding_mode)

        # replicate padding on the input layer keeps it exactly invariant to brightness shifts
        stem = _conv_block(config.in_channels, ws[0], config.negative_slope, 1, "replicate")
        self.stem = nn.Sequential(stem,
                                  *[block(ws[0], ws[0]) for _ in range(config.convs_per_level - 1)])
        self.down = nn.ModuleList()
        for l in range(1, config.levels + 1):
            layers = [block(ws[l - 1], ws[l], stride=2)]
            layers += [block(ws[l], ws[l]) for _ in range(config.convs_per_level)]
            self.down.append(nn.Sequential(*layers))
        self.up = nn.ModuleList()
        self.merge = nn.ModuleList()
        for l in range(config.levels, 0, -1):
            self.up.append(block(ws[l], ws[l - 1]))
            self.merge.append(block(2 * ws[l - 1], ws[l - 1]))
        self.head = nn.Conv2d(ws[0], config.output_channels, 1)

    def forward(self, x):
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ContractError(f"expected (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        h, w = x.shape[-2:]
        k = 2 ** self.config.levels
        if h % k or w % k:
            raise ContractError(f"input {h}x{w} not divisible by {k} (configured input_size {size})")
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(skips[-1]))
        bottleneck = skips.pop()
        encoded = bottleneck.mean(dim=(2, 3))
        y = bottleneck
        for up, merge in zip(self.up, self.merge):
            y = up(F.interpolate(y, scale_factor=2, mode="nearest"))
            y = merge(torch.cat([y, skips.pop()], dim=1))
        return self.head(y), encoded


class DirectGenerator(nn.Module):
    """Single copy-mask ``sigmoid(unet(x))``, shape (N, 1, H, W)."""

    kind = "direct"

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = _with_channels(config, 1)
        self.unet = UNet(self.config)

    def forward(self, x):
        out, _ = self.unet(x)
        return torch.sigmoid(out)


@dataclass
class InstColourOutput:
    features: torch.Tensor  # (N, 64, H, W)
    seediness_logits: torch.Tensor  # (N, H, W)
    value: torch.Tensor  # (N, H, W)


class InstColourGenerator(nn.Module):
    kind = "instance_colouring"

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = _with_channels(config, INSTCOLOUR_CHANNELS)
        self.unet = UNet(self.config)

    def forward(self, x) -> InstColourOutput:
        out, _ = self.unet(x)
        return InstColourOutput(
            features=out[:, :FEATURE_DIM],
            seediness_logits=out[:, FEATURE_DIM],
            value=out[:, FEATURE_DIM + 1],
        )


def induced_mask(features: torch.Tensor, seeds) -> torch.Tensor:
    """Mask induced by a seed pixel: ``sigmoid(f[seed] . f[i, j])``.

    ``features`` is (D, H, W) with ``seeds`` a single (y, x), giving (H, W);
    or (N, D, H, W) with ``seeds`` an (N, 2) integer tensor, giving (N, 1, H, W).
    """
    if features.dim() == 3:
        y, x = (int(v) for v in seeds)
        h, w = features.shape[1:]
        if not (0 <= y < h and 0 <= x < w):
            raise ContractError(f"seed {(y, x)} outside {h}x{w} feature map")
        return torch.sigmoid(torch.einsum("d,dhw->hw", features[:, y, x], features))
    seeds = torch.as_tensor(seeds, dtype=torch.long)
    n, _, h, w = features.shape
    if seeds.shape != (n, 2):
        raise ContractError(f"expected seeds of shape ({n}, 2), got {tuple(seeds.shape)}")
    if (seeds[:, 0] < 0).any() or (seeds[:, 0] >= h).any() or (seeds[:, 1] < 0).any() or (seeds[:, 1] >= w).any():
        raise ContractError("seed outside feature map")
    seed_f = features[torch.arange(n), :, seeds[:, 0], seeds[:, 1]]
    return torch.sigmoid(torch.einsum("nd,ndhw->nhw", seed_f, features)).unsqueeze(1)


@dataclass
class DiscOutput:
    realness: torch.Tensor  # (N,)
    mask: torch.Tensor  # (N, 1, H, W)


class Discriminator(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = _with_channels(config, 1)
        self.unet = UNet(self.config)
        self.fc = nn.Linear(self.config.encoder_dim, 1)

    def forward(self, x) -> DiscOutput:
        out, encoded = self.unet(x)
        return DiscOutput(realness=torch.sigmoid(self.fc(encoded)).squeeze(1), mask=torch.sigmoid(out))


def _with_channels(config: UNetConfig, channels: int) -> UNetConfig:
    return UNetConfig(**{**config.to_dict(), "output_channels": channels})


def build_generator(kind: str, config: UNetConfig) -> nn.Module:
    if kind == "direct":
        return DirectGenerator(config)
    if kind == "instance_colouring":
        return InstColourGenerator(config)
    raise ContractError(f"unknown generator kind {kind!r}")


def architecture_summary(module: nn.Module) -> dict:
    """Layer list and parameter count; depends only on the module's config."""
    params = [(name, tuple(p.shape)) for name, p in module.named_parameters()]
    return {"parameters": params, "count": sum(p.numel() for p in module.parameters())}
