"""Noise-prediction U-Net with a tapped bottleneck ("h-space").

The network is split into :meth:`Denoiser.encode` (returning the bottleneck
feature ``h`` together with the skip activations) and :meth:`Denoiser.decode`
so callers can intercept or edit ``h`` before decoding.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
from torch import nn
from torch.nn import functional as F

from .exceptions import ArgumentError, ConfigError


@dataclass(frozen=True)
class DenoiserConfig:
    resolution: int = 32
    base_channels: int = 64
    depth: int = 3
    time_embed_dim: int = 128
    h_channels: int = 128

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not isinstance(value, int) or value <= 0:
                raise ConfigError(f"denoiser.{name} must be a positive integer, got {value!r}")
        if self.resolution % (2**self.depth):
            raise ConfigError(
                f"denoiser.resolution={self.resolution} is not divisible by 2**depth={2**self.depth}"
            )

    @property
    def h_resolution(self) -> int:
        return self.resolution // 2**self.depth

    def stage_channels(self) -> list[int]:
        return [self.base_channels * min(2**i, 2) for i in range(self.depth)]


class DenoiserOutput(NamedTuple):
    eps_hat: torch.Tensor
    h: torch.Tensor


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (N, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _norm(ch: int) -> nn.GroupNorm:
    groups = 8 if ch % 8 == 0 else 1
    return nn.GroupNorm(groups, ch)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _norm(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = _norm(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Denoiser(nn.Module):
    """Encoder-decoder noise predictor f(x_t, t)."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        chs = config.stage_channels()
        tdim = config.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(tdim, tdim), nn.SiLU(), nn.Linear(tdim, tdim))
        self.stem = nn.Conv2d(3, chs[0], 3, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chs[0]
        for ch in chs:
            self.down_blocks.append(ResBlock(prev, ch, tdim))
            self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch

        self.mid1 = ResBlock(prev, config.h_channels, tdim)
        self.mid2 = ResBlock(config.h_channels, config.h_channels, tdim)

        self.upsample = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        prev = config.h_channels
        for ch in reversed(chs):
            self.upsample.append(nn.Conv2d(prev, ch, 3, padding=1))
            self.up_blocks.append(ResBlock(2 * ch, ch, tdim))
            prev = ch

        self.out_norm = _norm(prev)
        self.out_conv = nn.Conv2d(prev, 3, 3, padding=1)

    def _check_input(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        res = self.config.resolution
        if x.ndim != 4 or x.shape[1] != 3:
            raise ArgumentError(f"expected input of shape (N, 3, H, W), got {tuple(x.shape)}")
        if x.shape[2] != res or x.shape[3] != res:
            raise ArgumentError(f"denoiser expects {res}x{res} inputs, got {x.shape[2]}x{x.shape[3]}")
        t = torch.as_tensor(t, dtype=torch.long, device=x.device)
        if t.ndim == 0:
            t = t.expand(x.shape[0])
        return t

    def encode(self, x: torch.Tensor, t):
        """Return ``(h, skips, temb)``; ``h`` is the output of the bottleneck blocks."""
        t = self._check_input(x, t)
        temb = timestep_embedding(t, self.config.time_embed_dim).to(x.dtype)
        temb = self.time_mlp(temb)
        a = self.stem(x)
        skips = []
        for block, down in zip(self.down_blocks, self.downsample):
            a = block(a, temb)
            skips.append(a)
            a = down(a)
        h = self.mid2(self.mid1(a, temb), temb)
        return h, skips, temb

    def decode(self, h: torch.Tensor, skips, temb: torch.Tensor) -> torch.Tensor:
        a = h
        for up, block, skip in zip(self.upsample, self.up_blocks, reversed(skips)):
            a = up(F.interpolate(a, scale_factor=2, mode="nearest"))
            a = block(torch.cat([a, skip], dim=1), temb)
        return self.out_conv(F.silu(self.out_norm(a)))

    def denoise_with_h(self, x_t: torch.Tensor, t) -> DenoiserOutput:
        h, skips, temb = self.encode(x_t, t)
        return DenoiserOutput(self.decode(h, skips, temb), h)

    def forward(self, x_t, t):
        return self.denoise_with_h(x_t, t).eps_hat


class FrozenDenoiser:
    """Read-only handle on a trained denoiser.

    The wrapped parameters have ``requires_grad`` disabled and are not exposed
    through a ``parameters()`` method, so they cannot end up in an optimiser.
    Gradients still propagate through the network to its inputs.
    """

    def __init__(self, module: Denoiser):
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
        self._module = module

    @property
    def config(self) -> DenoiserConfig:
        return self._module.config

    @property
    def module(self) -> Denoiser:
        return self._module

    def denoise_with_h(self, x_t, t) -> DenoiserOutput:
        return self._module.denoise_with_h(x_t, t)

    def encode(self, x, t):
        return self._module.encode(x, t)

    def decode(self, h, skips, temb):
        return self._module.decode(h, skips, temb)

    def __call__(self, x_t, t):
        return self._module(x_t, t)

    def to(self, *args, **kwargs) -> "FrozenDenoiser":
        self._module.to(*args, **kwargs)
        return self

    def checksum(self) -> str:
        return parameter_checksum(self._module)


def freeze(denoiser) -> FrozenDenoiser:
    if isinstance(denoiser, FrozenDenoiser):
        return denoiser
    return FrozenDenoiser(denoiser)


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over the raw bytes of every parameter and buffer, in name order."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
