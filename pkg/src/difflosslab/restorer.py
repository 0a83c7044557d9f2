"""Small restoration backbones g(y) with a bounded [0, 1] output."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ArgumentError, ConfigError

ARCHS = ("plain_cnn", "unet_lite")


@dataclass(frozen=True)
class RestorerConfig:
    arch: str = "plain_cnn"
    base_channels: int = 32
    depth: int = 5
    param_budget: int | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"restorer.arch must be one of {ARCHS}, got {self.arch!r}")
        for name in ("base_channels", "depth"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"restorer.{name} must be a positive integer, got {value!r}")
        if self.param_budget is not None and (not isinstance(self.param_budget, int) or self.param_budget < 1):
            raise ConfigError(f"restorer.param_budget must be a positive integer, got {self.param_budget!r}")


PRESETS = {
    "efficient": RestorerConfig("plain_cnn", base_channels=32, depth=5, param_budget=100_000),
    "standard": RestorerConfig("unet_lite", base_channels=32, depth=3, param_budget=3_000_000),
}


class PlainCNN(nn.Module):
    """``depth`` 3x3 convolutions with ReLU in between, then a sigmoid."""

    def __init__(self, config: RestorerConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        widths = [3] + [c] * (config.depth - 1) + [3]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(widths[:-1], widths[1:]))

    def forward(self, y):
        a = y
        for i, conv in enumerate(self.convs):
            a = conv(a)
            if i < len(self.convs) - 1:
                a = F.relu(a)
        return torch.sigmoid(a)


def _double_conv(a: int, b: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(a, b, 3, padding=1), nn.ReLU(), nn.Conv2d(b, b, 3, padding=1), nn.ReLU())


class UNetLite(nn.Module):
    """Plain U-Net: ``depth`` pooling levels, channel doubling, skip concatenation."""

    def __init__(self, config: RestorerConfig):
        super().__init__()
        self.config = config
        chs = [config.base_channels * 2**i for i in range(config.depth + 1)]
        self.enc = nn.ModuleList()
        prev = 3
        for ch in chs[:-1]:
            self.enc.append(_double_conv(prev, ch))
            prev = ch
        self.mid = _double_conv(prev, chs[-1])
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        prev = chs[-1]
        for ch in reversed(chs[:-1]):
            self.up.append(nn.Conv2d(prev, ch, 3, padding=1))
            self.dec.append(_double_conv(2 * ch, ch))
            prev = ch
        self.head = nn.Conv2d(prev, 3, 1)

    def forward(self, y):
        div = 2**self.config.depth
        if y.shape[-1] % div or y.shape[-2] % div:
            raise ArgumentError(f"unet_lite needs spatial sizes divisible by {div}, got {tuple(y.shape[-2:])}")
        a = y
        skips = []
        for block in self.enc:
            a = block(a)
            skips.append(a)
            a = F.max_pool2d(a, 2)
        a = self.mid(a)
        for up, block, skip in zip(self.up, self.dec, reversed(skips)):
            a = up(F.interpolate(a, scale_factor=2, mode="nearest"))
            a = block(torch.cat([a, skip], dim=1))
        return torch.sigmoid(self.head(a))


def count_parameters(model: nn.Module) -> int:
    """Number of learnable scalars."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def build_restorer(config: RestorerConfig) -> nn.Module:
    model = PlainCNN(config) if config.arch == "plain_cnn" else UNetLite(config)
    n = count_parameters(model)
    if config.param_budget is not None and n > config.param_budget:
        raise ConfigError(f"{config.arch} has {n} parameters, over the budget of {config.param_budget}")
    return model


def restore(model: nn.Module, y: torch.Tensor) -> torch.Tensor:
    """Apply a restorer to a [0, 1] batch."""
    if y.ndim != 4 or y.shape[1] != 3:
        raise ArgumentError(f"expected (N, 3, H, W) input, got {tuple(y.shape)}")
    return model(y)
