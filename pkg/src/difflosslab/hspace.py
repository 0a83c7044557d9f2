"""Bottleneck-feature perturbation during regeneration, and the feature-distance sweep.

An image is re-noised to step ``t0`` and denoised back to step 1. At every
step the denoiser's bottleneck feature is reshaped to a (channels, pixels)
matrix, its leading singular value is scaled by ``1 + delta`` and decoding
continues from the edited feature. Probe-feature distances between the
regenerated and the original images show how much semantic content the
bottleneck carries for each kind of input.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .diffusion import NoiseSchedule, forward_diffuse, posterior_step, reconstruct_x0
from .exceptions import ArgumentError, ConfigError
from .metrics import features
from .validation import check_images, symmetric_to_unit, unit_to_symmetric

CONDITIONS = ("clean", "degraded", "restored_with", "restored_without")
CSV_COLUMNS = ("condition", "delta", "mean_dist", "std_dist", "n")


@dataclass(frozen=True)
class PerturbSpec:
    t0_frac: float = 0.5
    deltas: tuple = (0.0, 0.5, 1.0, 2.0)
    mode: str = "scale_sigma1"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.t0_frac <= 1:
            raise ConfigError(f"hspace.t0_frac must lie in (0, 1], got {self.t0_frac!r}")
        deltas = tuple(float(d) for d in self.deltas)
        if not deltas or deltas[0] != 0.0:
            raise ConfigError("hspace.deltas must start with 0 (the unperturbed level)")
        if any(d < 0 for d in deltas):
            raise ConfigError("hspace.deltas must be non-negative")
        if self.mode != "scale_sigma1":
            raise ConfigError(f"unknown perturbation mode {self.mode!r}")
        object.__setattr__(self, "deltas", deltas)

    def t0(self, s: NoiseSchedule) -> int:
        return max(1, int(round(self.t0_frac * s.T)))


class PerturbResult(NamedTuple):
    h: torch.Tensor
    sigma1: torch.Tensor
    degenerate: torch.Tensor


def svd_perturb(h: torch.Tensor, delta: float, *, check_energy: bool = False) -> PerturbResult:
    """Scale the leading singular value of each sample's (C, H*W) feature matrix by ``1 + delta``.

    All-zero samples are returned unchanged and flagged in ``degenerate``.
    With ``check_energy`` the identity
    ||h'||_F^2 = ||h||_F^2 + ((1 + delta)^2 - 1) * sigma1^2 is asserted.
    """
    if delta < 0:
        raise ArgumentError(f"delta must be >= 0, got {delta}")
    if h.ndim != 4:
        raise ArgumentError(f"expected a (N, C, H, W) feature, got shape {tuple(h.shape)}")
    n, c = h.shape[:2]
    m = h.reshape(n, c, -1).to(torch.float64)
    u, sv, vh = torch.linalg.svd(m, full_matrices=False)
    sigma1 = sv[:, 0].clone()
    degenerate = sigma1 == 0
    sv = sv.clone()
    sv[:, 0] = sv[:, 0] * (1.0 + delta)
    out = (u * sv[:, None, :]) @ vh
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} all-zero bottleneck features left unperturbed")
        out[degenerate] = m[degenerate]
    if check_energy:
        lhs = (out**2).sum(dim=(1, 2))
        rhs = (m**2).sum(dim=(1, 2)) + ((1 + delta) ** 2 - 1) * sigma1**2
        if not torch.allclose(lhs, rhs, rtol=1e-8, atol=1e-10):
            raise AssertionError("Frobenius energy identity violated")
    return PerturbResult(out.reshape(h.shape).to(h.dtype), sigma1, degenerate)


@torch.no_grad()
def _regenerate(x0: torch.Tensor, delta: float, t0: int, denoiser, s: NoiseSchedule, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    eps = torch.randn(x0.shape, generator=gen)
    x = forward_diffuse(x0, eps, t0, s)
    for t in range(t0, 0, -1):
        h, skips, temb = denoiser.encode(x, t)
        h = svd_perturb(h, delta).h
        eps_hat = denoiser.decode(h, skips, temb)
        x0_hat = reconstruct_x0(x, eps_hat, t, s).clamp(-1.0, 1.0)
        noise = torch.randn(x.shape, generator=gen) if t > 1 else None
        x = posterior_step(x, x0_hat, t, s, noise)
    return x.clamp(-1.0, 1.0)


def generate_perturbed(images, spec: PerturbSpec, denoiser, s: NoiseSchedule, *, batch_size: int = 64) -> list[np.ndarray]:
    """Regenerate ``images`` once per perturbation level; returns one [0, 1] batch per delta.

    Every level replays the same noise sequence, so outputs differ only
    through the bottleneck edit.
    """
    images = check_images(images, "unit", resolution=denoiser.config.resolution)
    t0 = spec.t0(s)
    outputs = []
    for delta in spec.deltas:
        chunks = []
        for i in range(0, len(images), batch_size):
            x0 = unit_to_symmetric(torch.from_numpy(images[i : i + batch_size]))
            chunks.append(_regenerate(x0, delta, t0, denoiser, s, spec.seed + i))
        out = torch.cat(chunks) if chunks else torch.empty(0, *images.shape[1:])
        outputs.append(symmetric_to_unit(out).clamp(0.0, 1.0).numpy())
    return outputs


def feature_distance_sweep(conditions: dict, spec: PerturbSpec, denoiser, s: NoiseSchedule, probe,
                           out_dir=None) -> list[dict]:
    """Mean/std L2 probe-feature distance between regenerated and original images.

    ``conditions`` maps names (normally clean, degraded, restored_with,
    restored_without) to [0, 1] image batches. A missing or ``None``
    condition yields rows with empty statistics rather than an error.
    """
    rows = []
    names = list(CONDITIONS) + [k for k in conditions if k not in CONDITIONS]
    for name in names:
        images = conditions.get(name)
        if images is None:
            rows.extend({"condition": name, "delta": d, "mean_dist": None, "std_dist": None, "n": 0}
                        for d in spec.deltas)
            continue
        ref = features(probe, images)
        for delta, regen in zip(spec.deltas, generate_perturbed(images, spec, denoiser, s)):
            dist = np.linalg.norm(features(probe, regen) - ref, axis=1)
            rows.append({"condition": name, "delta": delta, "mean_dist": float(dist.mean()),
                         "std_dist": float(dist.std()), "n": int(dist.size)})
    if out_dir is not None:
        write_sweep(rows, out_dir)
    return rows


def write_sweep(rows: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "hspace_distances.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if r[k] is None else r[k]) for k in CSV_COLUMNS})
    png_path = out_dir / "hspace_histogram.png"
    render_histogram(rows, png_path)
    return csv_path, png_path


def render_histogram(rows: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    conds = list(dict.fromkeys(r["condition"] for r in rows))
    deltas = list(dict.fromkeys(r["delta"] for r in rows))
    width = 0.8 / max(len(deltas), 1)
    fig, ax = plt.subplots(figsize=(7, 4))
    for j, d in enumerate(deltas):
        vals = [next((r["mean_dist"] for r in rows if r["condition"] == c and r["delta"] == d), None) for c in conds]
        xs = [i + j * width for i in range(len(conds))]
        ax.bar(xs, [v if v is not None else 0.0 for v in vals], width, label=f"delta={d:g}")
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(conds))], conds)
    ax.set_ylabel("mean probe-feature distance")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
