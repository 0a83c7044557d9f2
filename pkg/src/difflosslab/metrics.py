"""Evaluation metrics: PSNR, SSIM, feature Frechet distance and the probe classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.covariance import ledoit_wolf
from sklearn.utils.validation import check_is_fitted
from torch import nn
from torch.nn import functional as F

from .exceptions import ArgumentError, ConfigError, ProbeGateError
from .validation import check_images, check_labels, check_same_shape

PSNR_CAP = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _as_f64(a):
    if isinstance(a, torch.Tensor):
        a = a.detach().cpu().numpy()
    return np.asarray(a, dtype=np.float64)


def psnr(a, b, *, reduction="mean", cap: float | None = None):
    """Peak signal-to-noise ratio in dB for [0, 1] images (MAX = 1).

    Computed per image and averaged. Identical images give ``inf`` unless
    ``cap`` is set, in which case every per-image value is clipped to it.
    """
    a, b = _as_f64(a), _as_f64(b)
    check_same_shape(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    mse = ((a - b) ** 2).reshape(a.shape[0], -1).mean(axis=1)
    with np.errstate(divide="ignore"):
        values = 10.0 * np.log10(1.0 / mse)
    if cap is not None:
        values = np.minimum(values, cap)
    return values if reduction == "none" else float(values.mean())


def _gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(x**2) / (2 * sigma**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def to_luma(a: np.ndarray) -> np.ndarray:
    w = np.asarray(LUMA_WEIGHTS).reshape(1, 3, 1, 1)
    return (a * w).sum(axis=1, keepdims=True)


def ssim(a, b, *, reduction="mean"):
    """Mean structural similarity of the luma channel with an 11x11, sigma=1.5 window.

    Uses ``valid`` windows only, population statistics and the constants
    C1 = (0.01)^2, C2 = (0.03)^2 for unit dynamic range.
    """
    a, b = _as_f64(a), _as_f64(b)
    check_same_shape(a, b)
    if a.ndim == 3:
        a, b = a[None], b[None]
    if a.ndim != 4 or a.shape[1] != 3:
        raise ArgumentError(f"expected (N, 3, H, W) images, got {a.shape}")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ArgumentError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    x = torch.from_numpy(to_luma(a))
    y = torch.from_numpy(to_luma(b))
    win = _gaussian_window()
    mu_x, mu_y = F.conv2d(x, win), F.conv2d(y, win)
    sxx = F.conv2d(x * x, win) - mu_x**2
    syy = F.conv2d(y * y, win) - mu_y**2
    sxy = F.conv2d(x * y, win) - mu_x * mu_y
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    smap = ((2 * mu_x * mu_y + c1) * (2 * sxy + c2)) / ((mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2))
    per_image = smap.mean(dim=(1, 2, 3)).numpy()
    return per_image if reduction == "none" else float(per_image.mean())


def _feature_stats(f: np.ndarray, shrinkage: bool):
    n, d = f.shape
    mu = f.mean(axis=0)
    if n < d + 1:
        if not shrinkage:
            raise ArgumentError(
                f"need at least feature_dim + 1 = {d + 1} samples for a full-rank covariance, got {n}; "
                "pass shrinkage=True to use a Ledoit-Wolf estimate"
            )
        cov, _ = ledoit_wolf(f)
    else:
        cov = np.cov(f, rowvar=False)
    return mu, np.atleast_2d(cov)


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def _trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Tr((s1 s2)^(1/2)) via the symmetric form (s1^(1/2) s2 s1^(1/2))^(1/2)."""
    r = _psd_sqrt(s1)
    w = np.linalg.eigvalsh(r @ s2 @ r)
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(mu1, cov1, mu2, cov2) -> float:
    diff = np.asarray(mu1) - np.asarray(mu2)
    tr = 0.5 * (_trace_sqrt_product(cov1, cov2) + _trace_sqrt_product(cov2, cov1))
    return max(float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2.0 * tr), 0.0)


def desk_fid(features_a, features_b, *, shrinkage: bool = False) -> float:
    """Frechet distance between Gaussian fits of two feature sets (rows are samples)."""
    fa, fb = _as_f64(features_a), _as_f64(features_b)
    if fa.ndim != 2 or fb.ndim != 2 or fa.shape[1] != fb.shape[1]:
        raise ArgumentError(f"feature sets must be (n, d) with equal d, got {fa.shape} and {fb.shape}")
    mu1, c1 = _feature_stats(fa, shrinkage)
    mu2, c2 = _feature_stats(fb, shrinkage)
    return frechet_distance(mu1, c1, mu2, c2)


# --------------------------------------------------------------------------- probe classifier


@dataclass(frozen=True)
class ProbeConfig:
    n_classes: int = 8
    feature_dim: int = 64
    width: int = 32

    def __post_init__(self):
        for name in ("n_classes", "feature_dim", "width"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ConfigError(f"probe.{name} must be a positive integer, got {value!r}")


class ProbeNet(nn.Module):
    def __init__(self, config: ProbeConfig):
        super().__init__()
        self.config = config
        w = config.width
        self.body = nn.Sequential(
            nn.Conv2d(3, w, 3, padding=1), nn.BatchNorm2d(w), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(w, 2 * w, 3, padding=1), nn.BatchNorm2d(2 * w), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1), nn.BatchNorm2d(2 * w), nn.ReLU(), nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(2 * w * 16, config.feature_dim), nn.ReLU(),
        )
        self.head = nn.Linear(config.feature_dim, config.n_classes)

    def features(self, x):
        return self.body(x)

    def forward(self, x):
        return self.head(self.body(x))


class ProbeClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Small CNN trained on clean images; ``transform`` returns penultimate features.

    After :meth:`fit`, call :meth:`check_gate` on held-out clean data. The
    module-level :func:`top1` and :func:`features` refuse to run on a probe
    that has not passed the gate.
    """

    def __init__(self, n_classes=8, feature_dim=64, width=32, epochs=8, batch_size=64, lr=1e-3,
                 seed=0, gate=0.90):
        self.n_classes = n_classes
        self.feature_dim = feature_dim
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.gate = gate

    def _config(self) -> ProbeConfig:
        return ProbeConfig(self.n_classes, self.feature_dim, self.width)

    def fit(self, X, y):
        X = check_images(X, "unit", allow_empty=False)
        y = check_labels(y, X.shape[0], self.n_classes)
        with torch.random.fork_rng():
            torch.manual_seed(self.seed)
            self.net_ = ProbeNet(self._config())
        gen = torch.Generator().manual_seed(self.seed + 1)
        Xt, yt = torch.from_numpy(X), torch.from_numpy(y)
        opt = torch.optim.Adam(self.net_.parameters(), lr=self.lr)
        self.net_.train()
        self.loss_curve_ = []
        for _ in range(self.epochs):
            perm = torch.randperm(len(Xt), generator=gen)
            total = 0.0
            for start in range(0, len(perm), self.batch_size):
                idx = perm[start : start + self.batch_size]
                loss = F.cross_entropy(self.net_(Xt[idx]), yt[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(idx)
            self.loss_curve_.append(total / len(perm))
        self.net_.eval()
        for p in self.net_.parameters():
            p.requires_grad_(False)
        self.classes_ = np.arange(self.n_classes)
        self.gate_passed_ = False
        self.clean_accuracy_ = None
        return self

    @classmethod
    def from_net(cls, net: ProbeNet, clean_accuracy: float | None = None, gate: float = 0.90):
        """Wrap an already-trained network (e.g. loaded from a checkpoint)."""
        c = net.config
        probe = cls(n_classes=c.n_classes, feature_dim=c.feature_dim, width=c.width, gate=gate)
        net.eval()
        for p in net.parameters():
            p.requires_grad_(False)
        probe.net_ = net
        probe.classes_ = np.arange(c.n_classes)
        probe.clean_accuracy_ = clean_accuracy
        probe.gate_passed_ = clean_accuracy is not None and clean_accuracy >= gate
        return probe

    @torch.no_grad()
    def _batched(self, X, fn, batch=256):
        check_is_fitted(self, "net_")
        X = check_images(X, "unit")
        if X.shape[0] == 0:
            return None
        return torch.cat([fn(torch.from_numpy(X[i : i + batch])) for i in range(0, len(X), batch)]).numpy()

    def predict_proba(self, X):
        return self._batched(X, lambda x: torch.softmax(self.net_(x), dim=1))

    def predict(self, X):
        return self._batched(X, self.net_).argmax(axis=1)

    def transform(self, X):
        return self._batched(X, self.net_.features)

    def check_gate(self, X_clean, y_clean) -> float:
        """Measure clean held-out accuracy and record whether the gate passes."""
        acc = float(np.mean(self.predict(X_clean) == np.asarray(y_clean)))
        self.clean_accuracy_ = acc
        self.gate_passed_ = acc >= self.gate
        return acc


def train_probe(X_train, y_train, X_test, y_test, **params) -> ProbeClassifier:
    """Fit a probe on clean data and evaluate the clean-test gate."""
    probe = ProbeClassifier(**params).fit(X_train, y_train)
    probe.check_gate(X_test, y_test)
    return probe


def _require_gate(probe: ProbeClassifier):
    check_is_fitted(probe, "net_")
    if not getattr(probe, "gate_passed_", False):
        raise ProbeGateError(
            f"probe clean-test accuracy {probe.clean_accuracy_} is below the gate {probe.gate}; "
            "refusing to evaluate"
        )


def top1(probe: ProbeClassifier, images, labels) -> float:
    """Fraction of images classified correctly by a gated probe."""
    _require_gate(probe)
    labels = check_labels(labels, len(images))
    return float(np.mean(probe.predict(images) == labels))


def features(probe: ProbeClassifier, images) -> np.ndarray:
    """Penultimate-layer features of a gated probe, shape (N, feature_dim)."""
    _require_gate(probe)
    return probe.transform(images)


@dataclass
class MetricReport:
    psnr_db: float
    ssim: float
    desk_fid: float
    top1: float
    n_samples: int

    FIELDS = ("psnr_db", "ssim", "desk_fid", "top1", "n_samples")


def evaluate_images(restored, clean, labels, probe: ProbeClassifier, reference_features=None) -> MetricReport:
    """Full metric report for a restored set against its clean counterparts.

    desk-FID compares probe features of ``restored`` with ``reference_features``
    (by default the features of ``clean``).
    """
    restored = check_images(restored, "unit")
    clean = check_images(clean, "unit")
    ref = features(probe, clean) if reference_features is None else reference_features
    return MetricReport(
        psnr_db=psnr(restored, clean, cap=PSNR_CAP),
        ssim=ssim(restored, clean),
        desk_fid=desk_fid(features(probe, restored), ref, shrinkage=True),
        top1=top1(probe, restored, labels),
        n_samples=int(restored.shape[0]),
    )
