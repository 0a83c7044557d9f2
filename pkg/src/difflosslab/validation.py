"""Input validation helpers shared by the estimators and library functions."""

from __future__ import annotations

import numpy as np
import torch

from .exceptions import ArgumentError

RANGES = {"unit": (0.0, 1.0), "symmetric": (-1.0, 1.0)}


def check_images(X, range_tag="unit", *, resolution=None, allow_empty=True, dtype=np.float32):
    """Validate an image batch and return it as a contiguous ``(N, 3, H, W)`` array.

    Accepts numpy arrays, torch tensors or nested sequences. Values must be
    finite and inside the declared range (``unit`` is [0, 1], ``symmetric`` is
    [-1, 1]).
    """
    if range_tag not in RANGES:
        raise ArgumentError(f"unknown range tag {range_tag!r}")
    if isinstance(X, torch.Tensor):
        X = X.detach().cpu().numpy()
    X = np.ascontiguousarray(np.asarray(X, dtype=dtype))
    if X.ndim != 4:
        raise ArgumentError(f"expected a rank-4 (N, C, H, W) image batch, got shape {X.shape}")
    if X.shape[1] != 3:
        raise ArgumentError(f"expected 3 channels, got {X.shape[1]}")
    if X.shape[0] == 0:
        if not allow_empty:
            raise ArgumentError("empty image batch")
        return X
    if resolution is not None and X.shape[2:] != (resolution, resolution):
        raise ArgumentError(
            f"expected spatial size {resolution}x{resolution}, got {X.shape[2]}x{X.shape[3]}"
        )
    if not np.all(np.isfinite(X)):
        raise ArgumentError("image batch contains non-finite values")
    lo, hi = RANGES[range_tag]
    if X.min() < lo or X.max() > hi:
        raise ArgumentError(
            f"values outside the {range_tag} range [{lo}, {hi}]: min={X.min():.4g}, max={X.max():.4g}"
        )
    return X


def check_same_shape(a, b, names=("a", "b")):
    if tuple(a.shape) != tuple(b.shape):
        raise ArgumentError(f"shape mismatch: {names[0]}{tuple(a.shape)} vs {names[1]}{tuple(b.shape)}")


def check_labels(y, n_samples, n_classes=None):
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n_samples:
        raise ArgumentError(f"labels must have shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ArgumentError("labels must be integers")
    if n_classes is not None and y.size and (y.min() < 0 or y.max() >= n_classes):
        raise ArgumentError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64)


def to_tensor(X, device="cpu", dtype=torch.float32):
    if isinstance(X, torch.Tensor):
        return X.to(device=device, dtype=dtype)
    return torch.from_numpy(np.asarray(X)).to(device=device, dtype=dtype)


def unit_to_symmetric(x):
    """Map [0, 1] images to the diffusion domain [-1, 1] via v -> 2v - 1."""
    return 2.0 * x - 1.0


def symmetric_to_unit(x):
    """Inverse of :func:`unit_to_symmetric`: v -> (v + 1) / 2."""
    return (x + 1.0) / 2.0
