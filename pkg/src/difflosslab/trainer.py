"""Training loops for the toy DDPM and for restoration networks.

Both loops draw every random quantity for step ``k`` from substreams keyed
on ``k`` (see :mod:`difflosslab.seeding`), so a run resumed from a
checkpoint at step ``k`` continues exactly as the uninterrupted run would.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .denoiser import Denoiser, FrozenDenoiser
from .diffloss import DiffLossConfig, check_report, compute_total_loss, pixel_loss_report
from .diffusion import NoiseSchedule, ddpm_loss, forward_diffuse
from .exceptions import NumericError
from .seeding import RngBundle, epoch_batch

log = logging.getLogger(__name__)

RESTORATION_LOG_COLUMNS = ("step", "l_pix", "l_nat", "l_sem", "l_diff", "l_total", "t_used", "wallclock")
DDPM_LOG_COLUMNS = ("step", "loss", "lr", "wallclock")
EPS_ZERO_BASELINE = math.sqrt(2.0 / math.pi)


@dataclass
class TrainState:
    """Mutable bookkeeping returned by the loops."""

    step: int = 0
    rows: list = field(default_factory=list)
    eval_rows: list = field(default_factory=list)


def make_adam(params, lr: float, betas=(0.9, 0.999), state: dict | None = None) -> torch.optim.Adam:
    opt = torch.optim.Adam(params, lr=lr, betas=tuple(betas))
    if state is not None:
        opt.load_state_dict(state)
    return opt


def _finite(value: torch.Tensor, what: str, step: int):
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {what} at step {step}; aborting")


@torch.no_grad()
def heldout_ddpm_loss(model, x0: torch.Tensor, s: NoiseSchedule, rngs: RngBundle, batch_size: int = 128) -> float:
    """Mean absolute noise-prediction error on a fixed held-out draw of (t, eps)."""
    gen = rngs.torch("eval", 0)
    t = torch.randint(1, s.T + 1, (x0.shape[0],), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    # frozen handles are always in eval mode and expose no train()
    was_training = getattr(model, "training", False)
    if was_training:
        model.eval()
    total = 0.0
    for i in range(0, x0.shape[0], batch_size):
        sl = slice(i, i + batch_size)
        total += float(ddpm_loss(model, x0[sl], t[sl], eps[sl], s)) * x0[sl].shape[0]
    if was_training:
        model.train()
    return total / x0.shape[0]


def ddpm_training_loop(
    model: Denoiser,
    s: NoiseSchedule,
    x0: torch.Tensor,
    rngs: RngBundle,
    *,
    max_steps: int,
    batch_size: int,
    lr: float,
    betas=(0.9, 0.999),
    start_step: int = 0,
    optimizer_state: dict | None = None,
    x_heldout: torch.Tensor | None = None,
    eval_every: int = 0,
    stop_below: float | None = None,
    on_checkpoint: Callable | None = None,
    ckpt_every: int = 0,
) -> tuple[TrainState, torch.optim.Optimizer]:
    """Minimise the L1 noise-prediction loss over uniformly drawn timesteps.

    ``x0`` holds clean images in [-1, 1]. If ``stop_below`` is set, training
    ends at the first evaluation whose held-out loss is below it.
    """
    opt = make_adam(model.parameters(), lr, betas, optimizer_state)
    state = TrainState(step=start_step)
    model.train()
    t_start = time.perf_counter()

    def evaluate(step):
        value = heldout_ddpm_loss(model, x_heldout, s, rngs)
        state.eval_rows.append({"step": step, "heldout_loss": value})
        log.info("ddpm step %d held-out loss %.4f", step, value)
        return value

    if x_heldout is not None and eval_every and start_step == 0:
        evaluate(0)
    for step in range(start_step, max_steps):
        idx = torch.from_numpy(epoch_batch(rngs, step, x0.shape[0], batch_size))
        batch = x0[idx]
        t = torch.randint(1, s.T + 1, (batch.shape[0],), generator=rngs.torch("timestep", step))
        eps = torch.randn(batch.shape, generator=rngs.torch("noise", step))
        loss = ddpm_loss(model, batch, t, eps, s)
        _finite(loss, "DDPM loss", step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        state.step = step + 1
        state.rows.append({"step": step, "loss": float(loss.detach()), "lr": lr,
                           "wallclock": round(time.perf_counter() - t_start, 3)})
        done = state.step == max_steps
        if on_checkpoint is not None and ckpt_every and (state.step % ckpt_every == 0 or done):
            on_checkpoint(state.step, opt)
        if x_heldout is not None and eval_every and (state.step % eval_every == 0 or done):
            value = evaluate(state.step)
            if stop_below is not None and value < stop_below:
                if on_checkpoint is not None and not done:
                    on_checkpoint(state.step, opt)
                break
    model.eval()
    return state, opt


def restoration_training_loop(
    model: torch.nn.Module,
    y: torch.Tensor,
    x: torch.Tensor,
    rngs: RngBundle,
    *,
    max_steps: int,
    batch_size: int,
    lr: float,
    betas=(0.9, 0.999),
    denoiser: FrozenDenoiser | None = None,
    schedule: NoiseSchedule | None = None,
    diffloss: DiffLossConfig | None = None,
    patch_size: int | None = None,
    start_step: int = 0,
    optimizer_state: dict | None = None,
    on_eval: Callable | None = None,
    eval_every: int = 0,
    on_checkpoint: Callable | None = None,
    ckpt_every: int = 0,
) -> tuple[TrainState, torch.optim.Optimizer]:
    """Train ``model`` to map degraded ``y`` to clean ``x`` (both [0, 1]).

    With ``diffloss=None`` the objective is the pixel MSE alone; otherwise the
    pixel MSE plus the weighted DiffLoss through the frozen ``denoiser``.
    """
    if diffloss is not None and (denoiser is None or schedule is None):
        raise ValueError("DiffLoss training needs a frozen denoiser and its schedule")
    opt = make_adam(model.parameters(), lr, betas, optimizer_state)
    state = TrainState(step=start_step)
    model.train()
    t_start = time.perf_counter()
    h, w = x.shape[-2:]
    for step in range(start_step, max_steps):
        idx = torch.from_numpy(epoch_batch(rngs, step, x.shape[0], batch_size))
        xb, yb = x[idx], y[idx]
        if patch_size is not None and patch_size < min(h, w):
            prng = rngs.numpy("data", 1_000_000 + step)
            top, left = int(prng.integers(0, h - patch_size + 1)), int(prng.integers(0, w - patch_size + 1))
            xb = xb[..., top : top + patch_size, left : left + patch_size]
            yb = yb[..., top : top + patch_size, left : left + patch_size]
        z = model(yb)
        if diffloss is None:
            report = pixel_loss_report(xb, z)
        else:
            report = compute_total_loss(xb, z, denoiser, schedule, diffloss, rngs.torch("diffloss", step))
            check_report(report, lambda_sem=diffloss.lambda_sem)
        _finite(report.l_total, "restoration loss", step)
        opt.zero_grad(set_to_none=True)
        report.l_total.backward()
        opt.step()
        state.step = step + 1
        row = report.as_dict()
        state.rows.append({"step": step, **{k: row[k] for k in RESTORATION_LOG_COLUMNS[1:-1]},
                           "wallclock": round(time.perf_counter() - t_start, 3)})
        done = state.step == max_steps
        if on_eval is not None and eval_every and (state.step % eval_every == 0 or done):
            model.eval()
            on_eval(state.step, model)
            model.train()
        if on_checkpoint is not None and ckpt_every and (state.step % ckpt_every == 0 or done):
            on_checkpoint(state.step, opt)
    model.eval()
    return state, opt


@torch.no_grad()
def restore_array(model: torch.nn.Module, y: np.ndarray, batch_size: int = 256) -> np.ndarray:
    model.eval()
    out = [model(torch.from_numpy(np.ascontiguousarray(y[i : i + batch_size]))) for i in range(0, len(y), batch_size)]
    return torch.cat(out).numpy() if out else np.empty_like(y)
