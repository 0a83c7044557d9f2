"""Closed-form DDPM mathematics.

Timesteps are 1-based throughout: ``t = 1`` is the least noisy step and
``t = T`` the noisiest. Arrays on :class:`NoiseSchedule` are indexed with
``t - 1``. The convention ``alpha_bar_0 = 1`` makes the posterior variance
vanish at ``t = 1`` so the last sampling step is deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .exceptions import ArgumentError, ConfigError
from .validation import check_same_shape


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed diffusion coefficients for ``T`` steps (float64)."""

    beta: np.ndarray
    kind: str = "linear"
    beta_start: float | None = None
    beta_end: float | None = None
    alpha: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)
    alpha_bar_prev: np.ndarray = field(init=False, repr=False)
    posterior_var: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ConfigError("a noise schedule needs at least T=2 steps")
        if not np.all((beta > 0) & (beta < 1)):
            raise ConfigError("all betas must lie in the open interval (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
        posterior_var = (1.0 - alpha_bar_prev) / (1.0 - alpha_bar) * beta
        for name, value in [
            ("beta", beta),
            ("alpha", alpha),
            ("alpha_bar", alpha_bar),
            ("alpha_bar_prev", alpha_bar_prev),
            ("posterior_var", posterior_var),
        ]:
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def T(self) -> int:
        return int(self.beta.size)

    def descriptor(self) -> dict:
        """JSON-friendly description sufficient to rebuild the schedule."""
        if self.kind == "linear":
            return {"kind": "linear", "T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}
        return {"kind": self.kind, "T": self.T, "beta": self.beta.tolist()}

    @classmethod
    def from_descriptor(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind") == "linear":
            return make_linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))
        return cls(beta=np.asarray(d["beta"], dtype=np.float64), kind=d.get("kind", "custom"))

    def snr(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ConfigError(f"T must be an integer >= 2, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(T), dtype=np.float64)
    return NoiseSchedule(beta=beta, kind="linear", beta_start=float(beta_start), beta_end=float(beta_end))


def _check_t(t, s: NoiseSchedule, batch: int | None = None) -> torch.Tensor:
    tt = torch.as_tensor(t, dtype=torch.long)
    if tt.ndim > 1:
        raise ArgumentError("t must be a scalar or a 1-D tensor of per-sample steps")
    if tt.ndim == 1 and batch is not None and tt.shape[0] != batch:
        raise ArgumentError(f"got {tt.shape[0]} timesteps for a batch of {batch}")
    if tt.numel() and (int(tt.min()) < 1 or int(tt.max()) > s.T):
        raise ArgumentError(f"timestep out of range [1, {s.T}]: {tt.tolist()}")
    return tt


def _coef(values: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather ``values[t - 1]`` and shape it to broadcast against ``like``."""
    c = torch.from_numpy(np.asarray(values))[t - 1].to(dtype=like.dtype, device=like.device)
    if c.ndim == 1:
        c = c.view(-1, *([1] * (like.ndim - 1)))
    return c


def forward_diffuse(x0: torch.Tensor, eps: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps (no clamping)."""
    check_same_shape(x0, eps, ("x0", "eps"))
    t = _check_t(t, s, x0.shape[0])
    return _coef(np.sqrt(s.alpha_bar), t, x0) * x0 + _coef(np.sqrt(1.0 - s.alpha_bar), t, x0) * eps


def reconstruct_x0(x_t: torch.Tensor, eps_hat: torch.Tensor, t, s: NoiseSchedule) -> torch.Tensor:
    """Invert the forward step with a (predicted) noise map."""
    check_same_shape(x_t, eps_hat, ("x_t", "eps_hat"))
    t = _check_t(t, s, x_t.shape[0])
    return _coef(1.0 / np.sqrt(s.alpha_bar), t, x_t) * x_t - _coef(
        np.sqrt(1.0 / s.alpha_bar - 1.0), t, x_t
    ) * eps_hat


def posterior_coefficients(s: NoiseSchedule):
    """Return the (x0, x_t) coefficient arrays of the posterior mean."""
    c_x0 = np.sqrt(s.alpha_bar_prev) * s.beta / (1.0 - s.alpha_bar)
    c_xt = np.sqrt(s.alpha) * (1.0 - s.alpha_bar_prev) / (1.0 - s.alpha_bar)
    return c_x0, c_xt


def posterior_step(x_t: torch.Tensor, x0_hat: torch.Tensor, t, s: NoiseSchedule, noise=None) -> torch.Tensor:
    """One draw from q(x_{t-1} | x_t, x0_hat); ``noise=None`` means zero noise."""
    check_same_shape(x_t, x0_hat, ("x_t", "x0_hat"))
    t = _check_t(t, s, x_t.shape[0])
    c_x0, c_xt = posterior_coefficients(s)
    mean = _coef(c_x0, t, x_t) * x0_hat + _coef(c_xt, t, x_t) * x_t
    if noise is None:
        return mean
    check_same_shape(x_t, noise, ("x_t", "noise"))
    return mean + _coef(np.sqrt(s.posterior_var), t, x_t) * noise


def predict_eps(denoiser, x_t: torch.Tensor, t) -> torch.Tensor:
    """Evaluate a noise predictor: a model exposing ``denoise_with_h`` or a plain callable."""
    t = torch.as_tensor(t, dtype=torch.long, device=x_t.device)
    if t.ndim == 0:
        t = t.expand(x_t.shape[0])
    if hasattr(denoiser, "denoise_with_h"):
        return denoiser.denoise_with_h(x_t, t).eps_hat
    return denoiser(x_t, t)


def ddpm_loss(denoiser, x0: torch.Tensor, t, eps: torch.Tensor, s: NoiseSchedule) -> torch.Tensor:
    """Mean absolute error between the injected noise and its prediction."""
    x_t = forward_diffuse(x0, eps, t, s)
    eps_hat = predict_eps(denoiser, x_t, t)
    check_same_shape(eps_hat, eps, ("eps_hat", "eps"))
    return (eps - eps_hat).abs().mean()


def _randn(shape, rng, dtype=torch.float32):
    if isinstance(rng, np.random.Generator):
        return torch.from_numpy(rng.standard_normal(shape)).to(dtype)
    return torch.randn(shape, generator=rng, dtype=dtype)


@torch.no_grad()
def sample(denoiser, s: NoiseSchedule, shape, rng, *, clip_denoised=True, t_start=None, x_start=None):
    """Ancestral sampling from ``t_start`` (default ``T``) down to 1.

    ``rng`` is a ``torch.Generator`` or ``numpy.random.Generator`` and is the
    only source of randomness. With ``clip_denoised`` the intermediate x0
    estimates are clipped to [-1, 1]. Returns a batch clamped to [-1, 1].
    """
    t_start = s.T if t_start is None else int(t_start)
    _check_t(t_start, s)
    x = _randn(tuple(shape), rng) if x_start is None else x_start.clone()
    for t in range(t_start, 0, -1):
        eps_hat = predict_eps(denoiser, x, t)
        x0_hat = reconstruct_x0(x, eps_hat, t, s)
        if clip_denoised:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        noise = _randn(x.shape, rng, x.dtype) if t > 1 else None
        x = posterior_step(x, x0_hat, t, s, noise)
    return x.clamp(-1.0, 1.0)


def sample_timestep(rng, t_min: int, t_max: int, size=None):
    """Uniform integer draw(s) on ``[t_min, t_max]`` inclusive."""
    if not (isinstance(t_min, (int, np.integer)) and isinstance(t_max, (int, np.integer))):
        raise ArgumentError("t_min and t_max must be integers")
    if not 1 <= t_min <= t_max:
        raise ArgumentError(f"invalid timestep range [{t_min}, {t_max}]")
    if isinstance(rng, np.random.Generator):
        out = rng.integers(t_min, t_max + 1, size=size)
        return int(out) if size is None else torch.from_numpy(np.asarray(out, dtype=np.int64))
    n = 1 if size is None else int(np.prod(size))
    out = torch.randint(int(t_min), int(t_max) + 1, (n,), generator=rng)
    return int(out[0]) if size is None else out.view(size)
