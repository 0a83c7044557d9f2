import json

import numpy as np
import pytest
import torch

from conftest import TINY
from difflosslab.checkpoint import FORMAT_VERSION, load_checkpoint, read_manifest, save_checkpoint
from difflosslab.denoiser import Denoiser, DenoiserConfig, FrozenDenoiser, freeze, parameter_checksum, timestep_embedding
from difflosslab.diffusion import make_linear_schedule
from difflosslab.exceptions import (
    ArgumentError, CheckpointConfigMismatchError, CheckpointCorruptError, CheckpointShapeError,
    CheckpointVersionError, ConfigError,
)
from difflosslab.restorer import count_parameters


def test_h_shape_desk_config():
    torch.manual_seed(0)
    den = Denoiser(DenoiserConfig(resolution=32, depth=3, h_channels=128))
    out = den.denoise_with_h(torch.randn(4, 3, 32, 32), 10)
    assert out.h.shape == (4, 128, 4, 4)
    assert out.eps_hat.shape == (4, 3, 32, 32)


def test_desk_parameter_count_in_declared_range():
    n = count_parameters(Denoiser(DenoiserConfig()))
    assert 2_000_000 <= n <= 6_000_000


def test_deterministic_calls(tiny_denoiser):
    x = torch.randn(2, 3, 8, 8)
    a = tiny_denoiser.denoise_with_h(x, torch.tensor([3, 7]))
    b = tiny_denoiser.denoise_with_h(x, torch.tensor([3, 7]))
    assert torch.equal(a.eps_hat, b.eps_hat) and torch.equal(a.h, b.h)


def test_encode_decode_compose(tiny_denoiser):
    x = torch.randn(2, 3, 8, 8)
    h, skips, temb = tiny_denoiser.encode(x, 5)
    assert torch.equal(tiny_denoiser.decode(h, skips, temb), tiny_denoiser(x, 5))
    # skips come from shallower stages only
    assert all(s.shape[-1] > h.shape[-1] for s in skips)


def test_resolution_mismatch(tiny_denoiser):
    with pytest.raises(ArgumentError):
        tiny_denoiser(torch.randn(1, 3, 16, 16), 1)
    with pytest.raises(ArgumentError):
        tiny_denoiser(torch.randn(1, 1, 8, 8), 1)


@pytest.mark.parametrize("kw", [dict(resolution=30), dict(base_channels=0), dict(depth=-1), dict(h_channels=2.5)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        DenoiserConfig(**kw)


def test_timestep_embedding_injective_and_smooth():
    t = torch.arange(1, 1001)
    emb = timestep_embedding(t, 64)
    assert emb.shape == (1000, 64)
    d = torch.cdist(emb, emb) + torch.eye(1000) * 10
    assert float(d.min()) > 1e-3
    # Lipschitz in t with constant ||frequencies||, frequencies 10000^(-i/half).
    freqs = np.exp(-np.log(10000.0) * np.arange(32) / 32)
    assert float((emb[1:] - emb[:-1]).norm(dim=1).max()) <= np.linalg.norm(freqs) + 1e-9


@pytest.mark.parametrize("target", ["eps", "h"])
def test_input_gradient_matches_finite_differences(tiny_denoiser64, target):
    g = torch.Generator().manual_seed(1)
    x = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)

    def f(inp):
        out = tiny_denoiser64.denoise_with_h(inp, 9)
        return (out.eps_hat if target == "eps" else out.h).pow(2).sum()

    xr = x.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(f(xr), xr)
    fd = torch.zeros_like(x).view(-1)
    h = 1e-3
    with torch.no_grad():
        for i in range(x.numel()):
            e = torch.zeros(x.numel(), dtype=torch.float64)
            e[i] = h
            fd[i] = (f(x + e.view_as(x)) - f(x - e.view_as(x))) / (2 * h)
    rel = float((grad.view(-1) - fd).norm() / fd.norm())
    assert rel < 1e-3


def test_frozen_handle():
    torch.manual_seed(0)
    module = Denoiser(TINY)
    frozen = freeze(module)
    assert freeze(frozen) is frozen
    assert not hasattr(frozen, "parameters")
    assert all(not p.requires_grad for p in module.parameters())
    x = torch.randn(1, 3, 8, 8, requires_grad=True)
    frozen(x, 3).sum().backward()
    assert x.grad is not None and float(x.grad.abs().sum()) > 0
    assert all(p.grad is None for p in module.parameters())
    restorer = torch.nn.Conv2d(3, 3, 1)
    opt = torch.optim.Adam(restorer.parameters())
    assert sum(p.numel() for grp in opt.param_groups for p in grp["params"]) == count_parameters(restorer)


def test_checksum_changes_with_parameters():
    torch.manual_seed(0)
    m = Denoiser(TINY)
    before = parameter_checksum(m)
    assert parameter_checksum(m) == before
    with torch.no_grad():
        m.stem.weight[0, 0, 0, 0] += 1e-3
    assert parameter_checksum(m) != before


# --------------------------------------------------------------------------- checkpoint container


@pytest.fixture
def saved(tmp_path):
    torch.manual_seed(0)
    m = Denoiser(TINY)
    s = make_linear_schedule(50, 1e-3, 0.2)
    opt = torch.optim.Adam(m.parameters())
    m(torch.randn(1, 3, 8, 8), 2).sum().backward()
    opt.step()
    path = save_checkpoint(m, tmp_path / "ck", kind="denoiser", config=TINY, schedule=s, step=17, seed=5, optimizer=opt)
    return m, path


def test_checkpoint_round_trip_bitwise(saved):
    m, path = saved
    loaded = load_checkpoint(path, kind="denoiser", expected_config=TINY)
    x = torch.randn(2, 3, 8, 8)
    m.eval()
    assert torch.equal(loaded.model(x, 4), m(x, 4))
    man = loaded.manifest
    assert man["format_version"] == FORMAT_VERSION == 1
    assert man["step"] == 17 and man["seed"] == 5 and man["schedule"]["T"] == 50
    assert loaded.optimizer_state is not None
    assert parameter_checksum(loaded.model) == parameter_checksum(m)


def test_checkpoint_config_mismatch(saved):
    _, path = saved
    other = DenoiserConfig(resolution=16, base_channels=8, depth=2, time_embed_dim=16, h_channels=16)
    with pytest.raises(CheckpointConfigMismatchError):
        load_checkpoint(path, expected_config=other)
    with pytest.raises(CheckpointConfigMismatchError):
        load_checkpoint(path, kind="restorer")


def test_checkpoint_corrupt(saved):
    _, path = saved
    with open(path / "params.npz", "r+b") as fh:
        fh.seek(100)
        fh.write(b"\x00\xff\x00\xff")
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(path)


def test_checkpoint_missing_and_malformed(tmp_path, saved):
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "nope")
    _, path = saved
    (path / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointCorruptError):
        read_manifest(path)


def test_checkpoint_version(saved):
    _, path = saved
    man = json.loads((path / "manifest.json").read_text())
    man["format_version"] = 2
    (path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_shape_mismatch(saved, tmp_path):
    _, path = saved
    man = json.loads((path / "manifest.json").read_text())
    man["config"]["h_channels"] = 24
    (path / "manifest.json").write_text(json.dumps(man))
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_checkpoint_errors_are_distinct():
    kinds = {CheckpointCorruptError, CheckpointVersionError, CheckpointConfigMismatchError, CheckpointShapeError}
    assert len(kinds) == 4
    assert all(k.category == "io" for k in kinds)


def test_save_replaces_atomically(saved):
    m, path = saved
    save_checkpoint(m, path, kind="denoiser", config=TINY, step=99)
    assert read_manifest(path)["step"] == 99
    assert not [p for p in path.parent.iterdir() if p.name.startswith(".")]
    assert isinstance(freeze(load_checkpoint(path).model), FrozenDenoiser)
    assert np.load(path / "params.npz").files
