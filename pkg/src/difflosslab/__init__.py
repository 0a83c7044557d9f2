"""Diffusion-prior loss for image restoration, at desk scale.

A toy DDPM trained on synthetic shapes acts as a frozen prior. Restoration
networks are trained with pixel MSE plus a loss that compares the prior's
noise prediction and bottleneck feature on restored versus clean images.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, preset
from .denoiser import Denoiser, DenoiserConfig, FrozenDenoiser, freeze
from .diffloss import DiffLossConfig, LossReport, compute_diffloss, compute_total_loss, compute_variant_loss
from .diffusion import NoiseSchedule, forward_diffuse, make_linear_schedule, reconstruct_x0, sample
from .estimators import DiffLossRestorer, ToyDDPM
from .exceptions import (
    ArgumentError, CheckpointError, ConfigError, DataError, DiffLossLabError, NumericError, ProbeGateError,
)
from .metrics import ProbeClassifier, desk_fid, psnr, ssim, top1
from .restorer import RestorerConfig, build_restorer
from .synthdata import DegradationSpec, ShapeDegrader, ShapesDatasetSpec, degrade, generate_shapes

__all__ = [
    "__version__", "ExperimentConfig", "load_config", "preset", "Denoiser", "DenoiserConfig", "FrozenDenoiser",
    "freeze", "DiffLossConfig", "LossReport", "compute_diffloss", "compute_total_loss", "compute_variant_loss",
    "NoiseSchedule", "forward_diffuse", "make_linear_schedule", "reconstruct_x0", "sample", "DiffLossRestorer",
    "ToyDDPM", "ArgumentError", "CheckpointError", "ConfigError", "DataError", "DiffLossLabError", "NumericError",
    "ProbeGateError", "ProbeClassifier", "desk_fid", "psnr", "ssim", "top1", "RestorerConfig", "build_restorer",
    "DegradationSpec", "ShapeDegrader", "ShapesDatasetSpec", "degrade", "generate_shapes",
]
