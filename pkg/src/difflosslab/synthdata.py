"""Procedural shapes corpus and parametric image degradations.

Every image is rendered from its own seed stream
``SeedSequence([seed, split_code, index])``, so corpora are reproducible,
prefix-stable (the first ``n`` images do not depend on ``n_images``) and can
be sharded across workers by index. Degradation noise is likewise drawn per
image from ``SeedSequence([degradation_seed, index])``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from PIL import Image
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import ArgumentError, ConfigError, DataError
from .validation import check_images

SHAPES = ("disk", "ring", "square", "frame", "triangle", "cross", "star", "bar")
SPLITS = {"train": 0, "val": 1, "test": 2}
SUPERSAMPLE = 4
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class ShapesDatasetSpec:
    n_images: int = 1024
    resolution: int = 32
    n_classes: int = 8
    seed: int = 0
    split: str = "train"

    def __post_init__(self):
        if not isinstance(self.n_images, int) or self.n_images < 0:
            raise ConfigError(f"dataset.n_images must be a non-negative integer, got {self.n_images!r}")
        if not isinstance(self.resolution, int) or self.resolution < 8:
            raise ConfigError(f"dataset.resolution must be an integer >= 8, got {self.resolution!r}")
        if not isinstance(self.n_classes, int) or not 2 <= self.n_classes <= len(SHAPES):
            raise ConfigError(f"dataset.n_classes must lie in [2, {len(SHAPES)}], got {self.n_classes!r}")
        if self.split not in SPLITS:
            raise ConfigError(f"dataset.split must be one of {sorted(SPLITS)}, got {self.split!r}")


def _image_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), SPLITS[split], int(index)]))


def _shape_mask(name: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Membership of rotated, radius-normalised coordinates (a, b) in a unit shape."""
    rho = np.hypot(a, b)
    if name == "disk":
        return rho <= 0.85
    if name == "ring":
        return (rho <= 1.0) & (rho >= 0.55)
    if name == "square":
        return np.maximum(abs(a), abs(b)) <= 0.75
    if name == "frame":
        m = np.maximum(abs(a), abs(b))
        return (m <= 0.85) & (m >= 0.5)
    if name == "triangle":
        inside = np.ones_like(a, dtype=bool)
        for k in range(3):
            ang = np.pi / 2 + 2 * np.pi * k / 3
            inside &= a * np.cos(ang) + b * np.sin(ang) >= -0.5
        return inside
    if name == "cross":
        return ((abs(a) <= 0.3) & (abs(b) <= 1.0)) | ((abs(b) <= 0.3) & (abs(a) <= 1.0))
    if name == "star":
        phi = np.arctan2(b, a)
        return rho <= 0.4 + 0.6 * ((1 + np.cos(5 * phi)) / 2) ** 2
    if name == "bar":
        return (abs(a) <= 1.0) & (abs(b) <= 0.28)
    raise ArgumentError(f"unknown shape {name!r}")


def _smooth_field(rng: np.random.Generator, u: np.ndarray, v: np.ndarray, n_waves: int = 3) -> np.ndarray:
    """Low-frequency random field normalised to [0, 1] on the grid (u, v in [0, 1])."""
    f = rng.uniform(-1, 1) * u + rng.uniform(-1, 1) * v
    for _ in range(n_waves):
        freq = rng.uniform(0.5, 2.0)
        ang = rng.uniform(0, 2 * np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        f = f + 0.5 * np.sin(2 * np.pi * freq * (np.cos(ang) * u + np.sin(ang) * v) + phase)
    span = f.max() - f.min()
    return (f - f.min()) / span if span > 0 else np.zeros_like(f)


def render_shape(rng: np.random.Generator, label: int, resolution: int) -> np.ndarray:
    """Render one (3, H, W) image in [0, 1] containing shape class ``label``."""
    res = resolution
    ss = res * SUPERSAMPLE
    coords = (np.arange(ss) + 0.5) / SUPERSAMPLE
    yy, xx = np.meshgrid(coords, coords, indexing="ij")

    u, v = np.meshgrid((np.arange(res) + 0.5) / res, (np.arange(res) + 0.5) / res, indexing="ij")
    field_ = _smooth_field(rng, u, v)
    c1, c2 = rng.uniform(0.1, 0.9, size=3), rng.uniform(0.1, 0.9, size=3)
    bg = c1[:, None, None] * (1 - field_) + c2[:, None, None] * field_

    bg_luma = float(_LUMA @ bg.mean(axis=(1, 2)))
    for _ in range(64):
        color = rng.uniform(0.0, 1.0, size=3)
        if abs(float(_LUMA @ color) - bg_luma) >= 0.3:
            break

    radius = rng.uniform(0.24, 0.36) * res
    margin = radius + 1.0
    cy, cx = rng.uniform(margin, res - margin, size=2)
    theta = rng.uniform(0, 2 * np.pi)
    dy, dx = (yy - cy) / radius, (xx - cx) / radius
    a = np.cos(theta) * dx + np.sin(theta) * dy
    b = -np.sin(theta) * dx + np.cos(theta) * dy
    mask = _shape_mask(SHAPES[label], a, b).astype(np.float64)
    alpha = mask.reshape(res, SUPERSAMPLE, res, SUPERSAMPLE).mean(axis=(1, 3))

    img = bg * (1 - alpha) + color[:, None, None] * alpha
    return np.clip(img, 0.0, 1.0)


def generate_shapes(spec: ShapesDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(images, labels)``: float32 (N, 3, H, W) in [0, 1] and int64 (N,)."""
    images = np.empty((spec.n_images, 3, spec.resolution, spec.resolution), dtype=np.float32)
    labels = np.empty(spec.n_images, dtype=np.int64)
    for i in range(spec.n_images):
        rng = _image_rng(spec.seed, spec.split, i)
        labels[i] = rng.integers(spec.n_classes)
        images[i] = render_shape(rng, int(labels[i]), spec.resolution)
    return images, labels


# --------------------------------------------------------------------------- degradations

DEGRADATION_KINDS = ("lowlight", "haze", "rain", "noise", "blur")

DEFAULT_PARAMS = {
    "lowlight": {"gamma": 2.0, "gain": 0.4, "read_noise_sigma": 0.01},
    "haze": {"beta": 1.2, "airlight": 0.85, "depth_mode": "gradient_noise"},
    "rain": {"density": 0.03, "length": 7, "angle": -20.0, "intensity": 0.6},
    "noise": {"sigma": 0.1},
    "blur": {"sigma": 1.0},
}

# Severity ranges used by ``sample_degradation``; identity settings outside
# them (gain=1, gamma=1, beta=0, ...) stay valid for ``degrade``.
SEVERITY_RANGES = {
    "lowlight": {"gamma": (1.5, 3.0), "gain": (0.2, 0.6), "read_noise_sigma": (0.0, 0.03)},
    "haze": {"beta": (0.6, 2.0), "airlight": (0.7, 1.0)},
    "rain": {"density": (0.01, 0.05), "length": (4, 10), "angle": (-35.0, 35.0), "intensity": (0.4, 0.9)},
    "noise": {"sigma": (0.02, 0.2)},
    "blur": {"sigma": (0.5, 2.0)},
}


def _check_params(kind: str, p: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise ConfigError(f"degradation.params ({kind}): {msg}")

    for key, value in p.items():
        if key != "depth_mode":
            need(isinstance(value, (int, float)) and not isinstance(value, bool), f"{key} must be a number")
    if kind == "lowlight":
        need(0 < p["gain"] <= 1, "gain must lie in (0, 1]")
        need(p["gamma"] >= 1, "gamma must be >= 1")
        need(p["read_noise_sigma"] >= 0, "read_noise_sigma must be >= 0")
    elif kind == "haze":
        need(p["beta"] >= 0, "beta must be >= 0 (inf allowed)")
        need(0 <= p["airlight"] <= 1, "airlight must lie in [0, 1]")
        need(p["depth_mode"] in ("gradient_noise", "gradient", "uniform"), "unknown depth_mode")
    elif kind == "rain":
        need(0 <= p["density"] <= 1, "density must lie in [0, 1]")
        need(p["length"] >= 1, "length must be >= 1")
        need(0 <= p["intensity"] <= 1, "intensity must lie in [0, 1]")
    elif kind in ("noise", "blur"):
        need(p["sigma"] >= 0, "sigma must be >= 0")


@dataclass(frozen=True)
class DegradationSpec:
    kind: str = "lowlight"
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in DEGRADATION_KINDS:
            raise ConfigError(f"unknown degradation kind {self.kind!r}; expected one of {DEGRADATION_KINDS}")
        unknown = sorted(set(self.params) - set(DEFAULT_PARAMS[self.kind]))
        if unknown:
            raise ConfigError(f"unknown {self.kind} parameters: {unknown}")
        merged = {**DEFAULT_PARAMS[self.kind], **self.params}
        _check_params(self.kind, merged)
        object.__setattr__(self, "params", merged)

    def for_index(self, index: int) -> "DegradationSpec":
        """Spec whose batch-position-0 noise equals that of dataset image ``index``."""
        seq = np.random.SeedSequence([int(self.seed), int(index)])
        return replace(self, seed=int(seq.generate_state(1, dtype=np.uint32)[0]))


def sample_degradation(kind: str, rng: np.random.Generator, seed: int = 0) -> DegradationSpec:
    """Draw a degradation with parameters inside the declared severity ranges."""
    params = {}
    for key, (lo, hi) in SEVERITY_RANGES[kind].items():
        params[key] = float(rng.uniform(lo, hi))
    return DegradationSpec(kind=kind, params=params, seed=seed)


def _noise_rng(d: DegradationSpec, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(d.seed), int(i)]))


def haze_depth(rng: np.random.Generator, h: int, w: int, mode: str = "gradient_noise") -> np.ndarray:
    """Depth proxy in [0.1, 1]: far at the top, optionally with low-frequency noise."""
    v, u = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    if mode == "uniform":
        return np.ones((h, w))
    depth = 1.0 - v
    if mode == "gradient_noise":
        depth = 0.7 * depth + 0.3 * _smooth_field(rng, v, u, n_waves=2)
    span = depth.max() - depth.min()
    depth = (depth - depth.min()) / span if span > 0 else np.ones_like(depth)
    return 0.1 + 0.9 * depth


def _line_kernel(length: float, angle_deg: float) -> np.ndarray:
    size = int(np.ceil(length)) | 1
    k = np.zeros((size, size))
    c = size // 2
    ang = np.deg2rad(angle_deg)
    for s in np.linspace(-(length - 1) / 2, (length - 1) / 2, 4 * size):
        r, q = int(round(c - s * np.cos(ang))), int(round(c + s * np.sin(ang)))
        k[r, q] = 1.0
    return k


def _degrade_one(x: np.ndarray, d: DegradationSpec, rng: np.random.Generator) -> np.ndarray:
    p = d.params
    _, h, w = x.shape
    if d.kind == "lowlight":
        y = (p["gain"] * x) ** p["gamma"]
        if p["read_noise_sigma"] > 0:
            y = y + p["read_noise_sigma"] * rng.standard_normal(x.shape)
    elif d.kind == "haze":
        depth = haze_depth(rng, h, w, p["depth_mode"])
        with np.errstate(invalid="ignore", over="ignore"):
            tr = np.exp(-p["beta"] * depth)
        y = x * tr + p["airlight"] * (1.0 - tr)
    elif d.kind == "rain":
        seeds = (rng.random((h, w)) < p["density"]) * rng.uniform(0.5, 1.0, size=(h, w))
        layer = ndimage.convolve(seeds, _line_kernel(p["length"], p["angle"]), mode="constant")
        y = x + p["intensity"] * np.clip(layer, 0.0, 1.0)[None]
    elif d.kind == "noise":
        y = x + p["sigma"] * rng.standard_normal(x.shape)
    elif d.kind == "blur":
        y = ndimage.gaussian_filter(x, sigma=(0, p["sigma"], p["sigma"]), mode="reflect") if p["sigma"] > 0 else x
    else:  # guarded by DegradationSpec
        raise ConfigError(f"unknown degradation kind {d.kind!r}")
    return np.clip(y, 0.0, 1.0)


def degrade(x, d: DegradationSpec) -> np.ndarray:
    """Apply degradation ``d`` to a [0, 1] batch; image ``i`` draws noise from (d.seed, i)."""
    if not isinstance(d, DegradationSpec):
        raise ConfigError("degrade expects a DegradationSpec")
    x = check_images(x, "unit", dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        out[i] = _degrade_one(x[i], d, _noise_rng(d, i))
    return out.astype(np.float32)


def degrade_dataset(x, d: DegradationSpec, indices=None) -> np.ndarray:
    """Degrade dataset images whose noise is keyed on their dataset index."""
    x = check_images(x, "unit")
    indices = np.arange(x.shape[0]) if indices is None else np.asarray(indices)
    out = np.empty_like(x)
    for i, idx in enumerate(indices):
        out[i] = degrade(x[i : i + 1], d.for_index(int(idx)))[0]
    return out


class PairSample(NamedTuple):
    y: np.ndarray
    x: np.ndarray
    label: int
    index: int


def make_paired_arrays(spec: ShapesDatasetSpec, d: DegradationSpec):
    """Whole-split arrays ``(degraded, clean, labels)``."""
    x, labels = generate_shapes(spec)
    return degrade_dataset(x, d), x, labels


def crop_offsets(rng: np.random.Generator, height: int, width: int, patch: int) -> tuple[int, int]:
    if patch > height or patch > width:
        raise ArgumentError(f"patch size {patch} exceeds image size {height}x{width}")
    return int(rng.integers(0, height - patch + 1)), int(rng.integers(0, width - patch + 1))


def make_pairs(
    spec: ShapesDatasetSpec,
    d: DegradationSpec,
    *,
    shuffle_seed: int | None = None,
    patch_size: int | None = None,
    patch_seed: int = 0,
) -> Iterator[PairSample]:
    """Stream aligned (degraded, clean, label) samples.

    The order is the dataset order, or a permutation fixed by ``shuffle_seed``.
    Patches (when ``patch_size`` is set) are cropped at offsets drawn from
    ``(patch_seed, index)``; the same crop is applied to both images.
    """
    order = np.arange(spec.n_images)
    if shuffle_seed is not None:
        order = np.random.default_rng(np.random.SeedSequence([int(shuffle_seed), 7])).permutation(order)
    for idx in order:
        rng = _image_rng(spec.seed, spec.split, int(idx))
        label = int(rng.integers(spec.n_classes))
        x = render_shape(rng, label, spec.resolution).astype(np.float32)
        y = degrade(x[None], d.for_index(int(idx)))[0]
        if patch_size is not None:
            prng = np.random.default_rng(np.random.SeedSequence([int(patch_seed), int(idx)]))
            top, left = crop_offsets(prng, spec.resolution, spec.resolution, patch_size)
            x = x[:, top : top + patch_size, left : left + patch_size]
            y = y[:, top : top + patch_size, left : left + patch_size]
        yield PairSample(y, x, label, int(idx))


class ShapeDegrader(TransformerMixin, BaseEstimator):
    """Stateless transformer applying a synthetic degradation to [0, 1] images."""

    def __init__(self, kind="lowlight", params=None, seed=0):
        self.kind = kind
        self.params = params
        self.seed = seed

    def fit(self, X, y=None):
        self.spec_ = DegradationSpec(self.kind, dict(self.params or {}), self.seed)
        return self

    def transform(self, X):
        spec = getattr(self, "spec_", None) or DegradationSpec(self.kind, dict(self.params or {}), self.seed)
        return degrade_dataset(X, spec)


# --------------------------------------------------------------------------- on-disk cache


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def save_split(directory, images, labels, seed: int) -> Path:
    """Write images as PNG files plus ``index.csv`` (filename, label, seed)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images = check_images(images, "unit")
    with open(directory / "index.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["filename", "label", "seed"])
        for i, (img, label) in enumerate(zip(images, labels)):
            name = f"{i:06d}.png"
            Image.fromarray(_to_uint8(img)).save(directory / name)
            writer.writerow([name, int(label), int(seed)])
    return directory


def _read_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_split(directory) -> tuple[np.ndarray, np.ndarray]:
    directory = Path(directory)
    index = directory / "index.csv"
    if not index.exists():
        raise DataError(f"no index.csv in {directory}")
    with open(index, newline="") as fh:
        rows = list(csv.DictReader(fh))
    images = np.stack([_read_png(directory / r["filename"]) for r in rows]) if rows else np.empty((0, 3, 0, 0), np.float32)
    return images, np.array([int(r["label"]) for r in rows], dtype=np.int64)


def load_paired_folder(degraded_dir, clean_dir, pattern: str = "*.png") -> tuple[np.ndarray, np.ndarray]:
    """Load user-supplied degraded/clean image pairs matched by filename."""
    degraded_dir, clean_dir = Path(degraded_dir), Path(clean_dir)
    names = sorted(p.name for p in degraded_dir.glob(pattern))
    missing = [n for n in names if not (clean_dir / n).exists()]
    if missing:
        warnings.warn(f"{len(missing)} degraded images have no clean counterpart and are skipped")
    names = [n for n in names if n not in set(missing)]
    if not names:
        raise DataError(f"no matching image pairs in {degraded_dir} and {clean_dir}")
    y = np.stack([_read_png(degraded_dir / n) for n in names])
    x = np.stack([_read_png(clean_dir / n) for n in names])
    if y.shape != x.shape:
        raise DataError("degraded and clean images differ in size")
    return y, x
