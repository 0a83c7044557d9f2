import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from difflosslab.diffloss import (
    DiffLossConfig, adaptive_weight, check_report, compute_diffloss, compute_total_loss, compute_variant_loss,
    match_resolution, pixel_loss_report,
)
from difflosslab.diffusion import forward_diffuse, make_linear_schedule
from difflosslab.exceptions import ArgumentError, ConfigError
from difflosslab.validation import unit_to_symmetric


def _pair(seed, n=2, res=8, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, res, res, generator=g, dtype=dtype), torch.rand(n, 3, res, res, generator=g, dtype=dtype)


@pytest.mark.parametrize("variant", ["epsilon", "x0", "x_prev"])
@given(seed=st.integers(0, 10_000))
def test_zero_at_identity(tiny_denoiser, tiny_schedule, variant, seed):
    x, _ = _pair(seed)
    r = compute_variant_loss(x, x.clone(), tiny_denoiser, tiny_schedule, DiffLossConfig(variant=variant),
                             torch.Generator().manual_seed(seed))
    assert float(r.l_nat) == 0.0 and float(r.l_sem) == 0.0 and float(r.l_diff) == 0.0


def test_independent_noise_breaks_identity(tiny_denoiser, tiny_schedule):
    x, _ = _pair(0)
    r = compute_variant_loss(x, x.clone(), tiny_denoiser, tiny_schedule, DiffLossConfig(share_noise=False),
                             torch.Generator().manual_seed(0))
    assert float(r.l_nat) > 0


@pytest.mark.parametrize("variant", ["epsilon", "x0", "x_prev"])
def test_positive_for_different_images(tiny_denoiser, tiny_schedule, variant):
    x, z = _pair(3)
    r = compute_variant_loss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(variant=variant),
                             torch.Generator().manual_seed(3))
    assert float(r.l_nat) > 0 and float(r.l_sem) > 0
    assert r.variant_used == variant


@given(lam=st.floats(0, 10), gamma=st.floats(0, 10), seed=st.integers(0, 1000))
def test_decomposition(tiny_denoiser, tiny_schedule, lam, gamma, seed):
    x, z = _pair(seed)
    cfg = DiffLossConfig(lambda_sem=lam, gamma=gamma)
    r = compute_total_loss(x, z, tiny_denoiser, tiny_schedule, cfg, torch.Generator().manual_seed(seed))
    assert float(r.l_diff) == pytest.approx(float(r.l_nat) + lam * float(r.l_sem), rel=1e-6, abs=1e-9)
    assert float(r.l_total) == pytest.approx(float(r.l_pix) + gamma * float(r.l_diff), rel=1e-6, abs=1e-9)
    assert float(r.l_pix) == pytest.approx(float(((x - z) ** 2).mean()), rel=1e-6)
    check_report(r, gamma=gamma, lambda_sem=lam)


def test_check_report_detects_violation(tiny_denoiser, tiny_schedule):
    x, z = _pair(1)
    r = compute_total_loss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(), torch.Generator().manual_seed(1))
    r.l_total = r.l_total + 1.0
    with pytest.raises(AssertionError):
        check_report(r)


def test_clean_branch_has_no_graph(tiny_denoiser, tiny_schedule):
    x, z = _pair(2)
    x.requires_grad_(True)
    z.requires_grad_(True)
    r = compute_variant_loss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(), torch.Generator().manual_seed(2))
    r.l_diff.backward()
    assert x.grad is None
    assert z.grad is not None and float(z.grad.abs().sum()) > 0


def test_shared_draw_matches_manual_forward(tiny_denoiser, tiny_schedule):
    """The report's t and the epsilon draw are the ones both branches used."""
    x, z = _pair(4, n=1)
    gen = torch.Generator().manual_seed(9)
    r = compute_diffloss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(), gen)
    replay = torch.Generator().manual_seed(9)
    t = int(torch.randint(1, tiny_schedule.T + 1, (1,), generator=replay)[0])
    eps = torch.randn(x.shape, generator=replay)
    assert t == r.t_used
    with torch.no_grad():
        e_x = tiny_denoiser(forward_diffuse(unit_to_symmetric(x), eps, t, tiny_schedule), t)
        e_z = tiny_denoiser(forward_diffuse(unit_to_symmetric(z), eps, t, tiny_schedule), t)
    assert float(r.l_nat) == pytest.approx(float(((e_x - e_z) ** 2).mean()), rel=1e-5)


def test_noise_space_form_ignores_variant(tiny_denoiser, tiny_schedule):
    x, z = _pair(5)
    a = compute_diffloss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(variant="x0"), torch.Generator().manual_seed(0))
    b = compute_variant_loss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(), torch.Generator().manual_seed(0))
    assert a.variant_used == "epsilon" and float(a.l_diff) == float(b.l_diff)


def test_gamma_zero_matches_pixel_gradient(tiny_denoiser, tiny_schedule):
    x, z = _pair(6)
    z1, z2 = z.clone().requires_grad_(True), z.clone().requires_grad_(True)
    compute_total_loss(x, z1, tiny_denoiser, tiny_schedule, DiffLossConfig(gamma=0.0),
                       torch.Generator().manual_seed(0)).l_total.backward()
    pixel_loss_report(x, z2).l_total.backward()
    assert torch.equal(z1.grad, z2.grad)


@pytest.mark.parametrize("variant", ["epsilon", "x0", "x_prev"])
def test_diffloss_gradient_finite_differences(tiny_denoiser64, tiny_schedule, variant):
    x, z0 = _pair(11, n=1, dtype=torch.float64)
    cfg = DiffLossConfig(lambda_sem=0.5, variant=variant)

    def f(z):
        return compute_variant_loss(x, z, tiny_denoiser64, tiny_schedule, cfg, torch.Generator().manual_seed(4)).l_diff

    z = z0.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(z), z)
    v = torch.randn(z0.shape, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    h = 1e-5
    with torch.no_grad():
        fd = (f(z0 + h * v) - f(z0 - h * v)) / (2 * h)
    assert float((grad * v).sum()) == pytest.approx(float(fd), rel=1e-5)


def test_adaptive_weight():
    s = make_linear_schedule(100)
    assert adaptive_weight(1, s, 0.5, "constant") == 0.5
    assert adaptive_weight(10, s, 0.5) == pytest.approx(0.5 * s.alpha_bar[9])
    w = [adaptive_weight(t, s) for t in range(1, 101)]
    assert all(a > b for a, b in zip(w, w[1:]))
    with pytest.raises(ArgumentError):
        adaptive_weight(0, s)
    with pytest.raises(ConfigError):
        adaptive_weight(1, s, mode="cosine")


def test_adaptive_weight_used_in_total(tiny_denoiser, tiny_schedule):
    x, z = _pair(7)
    r = compute_total_loss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(gamma=1.0, weight_mode="timestep_adaptive"),
                           torch.Generator().manual_seed(7))
    assert r.weight == pytest.approx(tiny_schedule.alpha_bar[r.t_used - 1])
    check_report(r)


def test_t_range_respected(tiny_denoiser, tiny_schedule):
    for seed in range(20):
        x, z = _pair(seed)
        r = compute_diffloss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(t_min=5, t_max=7),
                             torch.Generator().manual_seed(seed))
        assert 5 <= r.t_used <= 7
    with pytest.raises(ConfigError):
        compute_diffloss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(t_max=tiny_schedule.T + 1),
                         torch.Generator())


def test_numpy_generator_accepted(tiny_denoiser, tiny_schedule):
    x, z = _pair(8)
    a = compute_diffloss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(), np.random.default_rng(3))
    b = compute_diffloss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(), np.random.default_rng(3))
    assert float(a.l_diff) == float(b.l_diff)


@pytest.mark.parametrize("kw", [dict(gamma=-1), dict(lambda_sem=-0.1), dict(gamma="a"), dict(variant="foo"),
                                dict(weight_mode="x"), dict(t_min=0), dict(t_min=5, t_max=3), dict(gamma=True)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DiffLossConfig(**kw)


def test_requires_frozen_denoiser(tiny_denoiser, tiny_schedule):
    x, z = _pair(0)
    with pytest.raises(ArgumentError):
        compute_diffloss(x, z, tiny_denoiser.module, tiny_schedule, DiffLossConfig(), torch.Generator())
    with pytest.raises(ArgumentError):
        compute_diffloss(x, z[:1], tiny_denoiser, tiny_schedule, DiffLossConfig(), torch.Generator())


def test_match_resolution():
    x = torch.arange(16.0).view(1, 1, 4, 4)
    assert torch.equal(match_resolution(x, 4), x)
    assert torch.equal(match_resolution(x, 2), x[..., 1:3, 1:3])
    up = match_resolution(x, 8)
    assert up.shape == (1, 1, 8, 8)
    assert float(up.mean()) == pytest.approx(float(x.mean()))


def test_patch_inputs_resized(tiny_denoiser, tiny_schedule):
    g = torch.Generator().manual_seed(0)
    x, z = torch.rand(1, 3, 4, 4, generator=g), torch.rand(1, 3, 4, 4, generator=g)
    r = compute_total_loss(x, z, tiny_denoiser, tiny_schedule, DiffLossConfig(), torch.Generator().manual_seed(0))
    assert np.isfinite(float(r.l_total))
