"""Diffusion-prior training loss for restoration networks.

Both the clean target and the restored image are pushed ``t`` steps through
the forward process with the same noise draw, and a frozen denoiser is run
once on each. The loss pulls the restored branch's predicted noise
(naturalness term) and bottleneck feature (semantic term) towards those of
the clean branch::

    l_nat   = mean((eps_clr - eps_rst)**2)
    l_sem   = mean((h_clr - h_rst)**2)
    l_diff  = l_nat + lambda_sem * l_sem
    l_total = mean((x - z)**2) + gamma * w(t) * l_diff

The clean branch is evaluated without gradient; gradients reach the restored
image through the frozen denoiser.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch
from torch.nn import functional as F

from .denoiser import FrozenDenoiser
from .diffusion import (
    NoiseSchedule,
    _randn,
    forward_diffuse,
    posterior_step,
    reconstruct_x0,
    sample_timestep,
)
from .exceptions import ArgumentError, ConfigError
from .validation import check_same_shape, unit_to_symmetric

VARIANTS = ("epsilon", "x0", "x_prev")
WEIGHT_MODES = ("constant", "timestep_adaptive")


@dataclass(frozen=True)
class DiffLossConfig:
    lambda_sem: float = 0.01
    gamma: float = 0.001
    t_min: int = 1
    t_max: int | None = None
    variant: str = "epsilon"
    weight_mode: str = "constant"
    share_noise: bool = True

    def __post_init__(self):
        if isinstance(self.lambda_sem, bool) or not isinstance(self.lambda_sem, (int, float)) or self.lambda_sem < 0:
            raise ConfigError(f"diffloss.lambda_sem must be a real >= 0, got {self.lambda_sem!r}")
        if isinstance(self.gamma, bool) or not isinstance(self.gamma, (int, float)) or self.gamma < 0:
            raise ConfigError(f"diffloss.gamma must be a real >= 0, got {self.gamma!r}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"diffloss.variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.weight_mode not in WEIGHT_MODES:
            raise ConfigError(f"diffloss.weight_mode must be one of {WEIGHT_MODES}, got {self.weight_mode!r}")
        if not isinstance(self.t_min, int) or self.t_min < 1:
            raise ConfigError(f"diffloss.t_min must be an integer >= 1, got {self.t_min!r}")
        if self.t_max is not None and (not isinstance(self.t_max, int) or self.t_max < self.t_min):
            raise ConfigError(f"diffloss.t_max must be an integer >= t_min, got {self.t_max!r}")

    def t_range(self, s: NoiseSchedule) -> tuple[int, int]:
        t_max = s.T if self.t_max is None else self.t_max
        if t_max > s.T:
            raise ConfigError(f"diffloss.t_max={t_max} exceeds the schedule length T={s.T}")
        return self.t_min, t_max


@dataclass
class LossReport:
    """Decomposed losses for one step. Tensor fields are 0-d and keep their graph."""

    l_nat: torch.Tensor
    l_sem: torch.Tensor
    l_diff: torch.Tensor
    t_used: int
    variant_used: str
    l_pix: torch.Tensor | None = None
    l_total: torch.Tensor | None = None
    weight: float | None = None

    def as_dict(self) -> dict:
        def f(v):
            return None if v is None else float(v.detach())

        return {
            "l_pix": f(self.l_pix),
            "l_nat": f(self.l_nat),
            "l_sem": f(self.l_sem),
            "l_diff": f(self.l_diff),
            "l_total": f(self.l_total),
            "t_used": self.t_used,
            "variant": self.variant_used,
            "weight": self.weight,
        }


def adaptive_weight(t: int, s: NoiseSchedule, gamma: float = 1.0, mode: str = "timestep_adaptive") -> float:
    """Effective DiffLoss weight at step ``t``: ``gamma * alpha_bar_t`` (adaptive) or ``gamma``."""
    if mode == "constant":
        return float(gamma)
    if mode != "timestep_adaptive":
        raise ConfigError(f"unknown weight mode {mode!r}")
    if not 1 <= t <= s.T:
        raise ArgumentError(f"timestep out of range [1, {s.T}]: {t}")
    return float(gamma * s.alpha_bar[t - 1])


def match_resolution(x: torch.Tensor, resolution: int) -> torch.Tensor:
    """Center-crop larger images and bilinearly upsample smaller ones."""
    h, w = x.shape[-2:]
    if (h, w) == (resolution, resolution):
        return x
    if h >= resolution and w >= resolution:
        top, left = (h - resolution) // 2, (w - resolution) // 2
        return x[..., top : top + resolution, left : left + resolution]
    return F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False)


def _check_inputs(x_clear, z_restored, denoiser):
    if not isinstance(denoiser, FrozenDenoiser):
        raise ArgumentError("the diffusion prior must be frozen first (see difflosslab.denoiser.freeze)")
    check_same_shape(x_clear, z_restored, ("x_clear", "z_restored"))
    if x_clear.ndim != 4 or x_clear.shape[1] != 3:
        raise ArgumentError(f"expected (N, 3, H, W) batches, got {tuple(x_clear.shape)}")


def compute_variant_loss(x_clear, z_restored, denoiser, s: NoiseSchedule, cfg: DiffLossConfig, rng) -> LossReport:
    """Naturalness and semantic terms for the configured constrained quantity.

    ``variant='epsilon'`` compares predicted noise, ``'x0'`` the reconstructed
    clean estimates and ``'x_prev'`` the one-step posterior means (zero
    noise). The semantic term always compares bottleneck features.
    """
    _check_inputs(x_clear, z_restored, denoiser)
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown DiffLoss variant {cfg.variant!r}")
    res = denoiser.config.resolution
    x0 = unit_to_symmetric(match_resolution(x_clear, res))
    z0 = unit_to_symmetric(match_resolution(z_restored, res))

    t = sample_timestep(rng, *cfg.t_range(s))
    eps = _randn(tuple(x0.shape), rng, x0.dtype).to(x0.device)
    eps_rst = eps if cfg.share_noise else _randn(tuple(x0.shape), rng, x0.dtype).to(x0.device)

    with torch.no_grad():
        x_t = forward_diffuse(x0.detach(), eps, t, s)
        eps_clr, h_clr = denoiser.denoise_with_h(x_t, t)
    z_t = forward_diffuse(z0, eps_rst, t, s)
    eps_rst_hat, h_rst = denoiser.denoise_with_h(z_t, t)

    if cfg.variant == "epsilon":
        target, pred = eps_clr, eps_rst_hat
    else:
        with torch.no_grad():
            x0_hat = reconstruct_x0(x_t, eps_clr, t, s)
        z0_hat = reconstruct_x0(z_t, eps_rst_hat, t, s)
        if cfg.variant == "x0":
            target, pred = x0_hat, z0_hat
        else:
            with torch.no_grad():
                target = posterior_step(x_t, x0_hat, t, s, None)
            pred = posterior_step(z_t, z0_hat, t, s, None)

    l_nat = ((target - pred) ** 2).mean()
    l_sem = ((h_clr - h_rst) ** 2).mean()
    return LossReport(l_nat=l_nat, l_sem=l_sem, l_diff=l_nat + cfg.lambda_sem * l_sem, t_used=t, variant_used=cfg.variant)


def compute_diffloss(x_clear, z_restored, denoiser, s: NoiseSchedule, cfg: DiffLossConfig, rng) -> LossReport:
    """The noise-space form of the loss, regardless of ``cfg.variant``."""
    if cfg.variant != "epsilon":
        cfg = replace(cfg, variant="epsilon")
    return compute_variant_loss(x_clear, z_restored, denoiser, s, cfg, rng)


def compute_total_loss(x_clear, z_restored, denoiser, s: NoiseSchedule, cfg: DiffLossConfig, rng) -> LossReport:
    """Pixel MSE plus the weighted DiffLoss for the configured variant."""
    report = compute_variant_loss(x_clear, z_restored, denoiser, s, cfg, rng)
    l_pix = ((x_clear - z_restored) ** 2).mean()
    weight = adaptive_weight(report.t_used, s, cfg.gamma, cfg.weight_mode)
    report.l_pix = l_pix
    report.weight = weight
    report.l_total = l_pix + weight * report.l_diff
    return report


def pixel_loss_report(x_clear, z_restored) -> LossReport:
    """Report for the plain L2 arm (DiffLoss disabled)."""
    check_same_shape(x_clear, z_restored, ("x_clear", "z_restored"))
    l_pix = ((x_clear - z_restored) ** 2).mean()
    zero = torch.zeros((), dtype=l_pix.dtype)
    return LossReport(l_nat=zero, l_sem=zero, l_diff=zero, t_used=0, variant_used="none",
                      l_pix=l_pix, l_total=l_pix, weight=0.0)


def check_report(report: LossReport, gamma: float | None = None, lambda_sem: float | None = None, atol=1e-6) -> None:
    """Assert the decomposition identities of a report (used by the trainer's logger)."""
    d = report.as_dict()
    if lambda_sem is not None:
        expect = d["l_nat"] + lambda_sem * d["l_sem"]
        if not np.isclose(d["l_diff"], expect, rtol=1e-5, atol=atol):
            raise AssertionError(f"l_diff={d['l_diff']} != l_nat + lambda*l_sem={expect}")
    if d["l_total"] is not None and report.weight is not None:
        expect = d["l_pix"] + report.weight * d["l_diff"]
        if not np.isclose(d["l_total"], expect, rtol=1e-5, atol=atol):
            raise AssertionError(f"l_total={d['l_total']} != l_pix + w*l_diff={expect}")
    for key in ("l_pix", "l_nat", "l_sem", "l_diff", "l_total"):
        if d[key] is not None and d[key] < 0:
            raise AssertionError(f"{key} is negative")
