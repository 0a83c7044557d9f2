import math

import numpy as np
import pytest
import torch

from difflosslab.denoiser import Denoiser
from difflosslab.diffloss import DiffLossConfig
from difflosslab.exceptions import NumericError
from difflosslab.restorer import RestorerConfig, build_restorer
from difflosslab.seeding import RngBundle, epoch_batch, set_global_seed
from difflosslab.trainer import EPS_ZERO_BASELINE, ddpm_training_loop, heldout_ddpm_loss, restoration_training_loop
from conftest import TINY


def _data(n=32, res=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(n, 3, res, res, generator=g)
    return (x * 0.5).clamp(0, 1), x


def _restorer(rngs):
    return rngs.init_module(build_restorer, RestorerConfig("plain_cnn", 4, 2))


def _params(m):
    return torch.cat([p.detach().reshape(-1) for p in m.parameters()])


def test_eps_baseline_constant():
    assert EPS_ZERO_BASELINE == pytest.approx(math.sqrt(2 / math.pi))


def test_restoration_resume_identical(tiny_denoiser, tiny_schedule):
    y, x = _data()
    rngs = RngBundle(7)
    cfg = DiffLossConfig(gamma=0.5)
    kw = dict(batch_size=8, lr=1e-3, denoiser=tiny_denoiser, schedule=tiny_schedule, diffloss=cfg)
    full_model = _restorer(rngs)
    full, _ = restoration_training_loop(full_model, y, x, rngs, max_steps=10, **kw)
    part_model = _restorer(rngs)
    first, opt = restoration_training_loop(part_model, y, x, rngs, max_steps=5, **kw)
    second, _ = restoration_training_loop(part_model, y, x, rngs, max_steps=10, start_step=5,
                                          optimizer_state=opt.state_dict(), **kw)
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wallclock"} for r in rows]  # noqa: E731
    assert strip(first.rows + second.rows) == strip(full.rows)
    assert torch.equal(_params(full_model), _params(part_model))


def test_gamma_zero_equals_pixel_only(tiny_denoiser, tiny_schedule):
    y, x = _data()
    rngs = RngBundle(3)
    a, b = _restorer(rngs), _restorer(rngs)
    restoration_training_loop(a, y, x, rngs, max_steps=6, batch_size=8, lr=1e-3)
    restoration_training_loop(b, y, x, rngs, max_steps=6, batch_size=8, lr=1e-3, denoiser=tiny_denoiser,
                              schedule=tiny_schedule, diffloss=DiffLossConfig(gamma=0.0))
    assert torch.equal(_params(a), _params(b))


def test_logged_decomposition(tiny_denoiser, tiny_schedule):
    y, x = _data()
    rngs = RngBundle(1)
    state, _ = restoration_training_loop(_restorer(rngs), y, x, rngs, max_steps=4, batch_size=8, lr=1e-3,
                                         denoiser=tiny_denoiser, schedule=tiny_schedule,
                                         diffloss=DiffLossConfig(gamma=0.3, lambda_sem=2.0), patch_size=4)
    for r in state.rows:
        assert r["l_diff"] == pytest.approx(r["l_nat"] + 2.0 * r["l_sem"], rel=1e-6)
        assert r["l_total"] == pytest.approx(r["l_pix"] + 0.3 * r["l_diff"], rel=1e-6)
        assert 1 <= r["t_used"] <= tiny_schedule.T


def test_non_finite_aborts():
    y, x = _data()
    y[0, 0, 0, 0] = float("nan")
    rngs = RngBundle(0)
    with pytest.raises(NumericError, match="step"):
        restoration_training_loop(_restorer(rngs), y, x, rngs, max_steps=50, batch_size=32, lr=1e-3)


def test_needs_denoiser_for_diffloss():
    y, x = _data()
    with pytest.raises(ValueError):
        restoration_training_loop(_restorer(RngBundle(0)), y, x, RngBundle(0), max_steps=1, batch_size=4, lr=1e-3,
                                  diffloss=DiffLossConfig())


def test_callbacks_fire(tiny_denoiser, tiny_schedule):
    y, x = _data()
    evals, ckpts = [], []
    restoration_training_loop(_restorer(RngBundle(0)), y, x, RngBundle(0), max_steps=7, batch_size=8, lr=1e-3,
                              on_eval=lambda s, m: evals.append(s), eval_every=3,
                              on_checkpoint=lambda s, o: ckpts.append(s), ckpt_every=5)
    assert evals == [3, 6, 7] and ckpts == [5, 7]


def test_ddpm_loop_learns_and_resumes(tiny_schedule):
    _, x = _data(n=64, seed=2)
    x0 = x * 2 - 1
    rngs = RngBundle(4)
    kw = dict(batch_size=16, lr=2e-3, x_heldout=x0[:16], eval_every=10)
    m1 = rngs.init_module(Denoiser, TINY)
    s1, _ = ddpm_training_loop(m1, tiny_schedule, x0, rngs, max_steps=30, **kw)
    assert s1.eval_rows[0]["step"] == 0 and s1.eval_rows[-1]["step"] == 30
    assert s1.eval_rows[-1]["heldout_loss"] < s1.eval_rows[0]["heldout_loss"]
    m2 = rngs.init_module(Denoiser, TINY)
    a, opt = ddpm_training_loop(m2, tiny_schedule, x0, rngs, max_steps=12, **kw)
    ddpm_training_loop(m2, tiny_schedule, x0, rngs, max_steps=30, start_step=12, optimizer_state=opt.state_dict(), **kw)
    assert torch.equal(_params(m1), _params(m2))


def test_ddpm_stop_below(tiny_schedule):
    _, x = _data(n=32, seed=5)
    rngs = RngBundle(0)
    m = rngs.init_module(Denoiser, TINY)
    state, _ = ddpm_training_loop(m, tiny_schedule, x * 2 - 1, rngs, max_steps=100, batch_size=8, lr=1e-3,
                                  x_heldout=x[:8] * 2 - 1, eval_every=5, stop_below=10.0)
    assert state.step == 5


def test_heldout_loss_fixed_draw(tiny_denoiser, tiny_schedule):
    _, x = _data()
    rngs = RngBundle(9)
    a = heldout_ddpm_loss(tiny_denoiser, x, tiny_schedule, rngs)
    b = heldout_ddpm_loss(tiny_denoiser, x, tiny_schedule, rngs, batch_size=5)
    assert a == pytest.approx(b, rel=1e-6)


# --------------------------------------------------------------------------- seeding


def test_substreams_independent_and_stable():
    r = RngBundle(0)
    assert r.seed_for("noise", 3) == r.seed_for("noise", 3)
    seeds = {r.seed_for(s, k) for s in ("init", "data", "noise", "timestep", "diffloss") for k in range(50)}
    assert len(seeds) == 250
    a = r.numpy("noise", 1).standard_normal(5000)
    b = r.numpy("timestep", 1).standard_normal(5000)
    assert abs(np.corrcoef(a, b)[0, 1]) < 4 / math.sqrt(5000)
    assert RngBundle(1).seed_for("noise") != r.seed_for("noise")


def test_set_global_seed_validation():
    assert set_global_seed(3) == RngBundle(3)
    with pytest.raises(ValueError):
        set_global_seed(-1)


def test_epoch_batch_covers_each_epoch():
    r = RngBundle(0)
    idx = np.concatenate([epoch_batch(r, s, 20, 5) for s in range(4)])
    assert sorted(idx) == list(range(20))
    assert not np.array_equal(epoch_batch(r, 0, 20, 5), epoch_batch(r, 4, 20, 5))
