import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from difflosslab.exceptions import ArgumentError, ConfigError
from difflosslab.hspace import CSV_COLUMNS, PerturbSpec, feature_distance_sweep, generate_perturbed, svd_perturb
from difflosslab.metrics import ProbeClassifier, ProbeConfig, ProbeNet


def test_delta_zero_is_identity():
    h = torch.randn(3, 16, 4, 4, dtype=torch.float64)
    out = svd_perturb(h, 0.0)
    assert torch.allclose(out.h, h, atol=1e-12)


def test_rank_one_doubles():
    u = torch.randn(2, 5, 1, dtype=torch.float64)
    v = torch.randn(2, 1, 9, dtype=torch.float64)
    h = (u @ v).reshape(2, 5, 3, 3)
    assert torch.allclose(svd_perturb(h, 1.0).h, 2 * h, atol=1e-10)


@given(delta=st.floats(0, 5), seed=st.integers(0, 10_000))
@settings(max_examples=30)
def test_energy_identity_and_sigma(delta, seed):
    h = torch.randn(2, 6, 3, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    out = svd_perturb(h, delta, check_energy=True)
    m = h.reshape(2, 6, 9)
    np.testing.assert_allclose(out.sigma1.numpy(), np.linalg.svd(m.numpy(), compute_uv=False)[:, 0], rtol=1e-10)
    new_s1 = np.linalg.svd(out.h.reshape(2, 6, 9).numpy(), compute_uv=False)[:, 0]
    np.testing.assert_allclose(new_s1, (1 + delta) * out.sigma1.numpy(), rtol=1e-8)


def test_zero_feature_warns_and_passes_through():
    h = torch.zeros(2, 4, 2, 2)
    h[1] = 1.0
    with pytest.warns(UserWarning, match="all-zero"):
        out = svd_perturb(h, 1.0)
    assert torch.equal(out.h[0], h[0]) and out.degenerate.tolist() == [True, False]
    assert torch.allclose(out.h[1], 2 * h[1])


def test_bad_arguments():
    with pytest.raises(ArgumentError):
        svd_perturb(torch.zeros(1, 2, 2, 2), -0.1)
    with pytest.raises(ArgumentError):
        svd_perturb(torch.zeros(2, 2, 2), 0.1)
    for kw in (dict(t0_frac=0), dict(deltas=(0.5, 1)), dict(deltas=(0, -1)), dict(mode="rank2")):
        with pytest.raises(ConfigError):
            PerturbSpec(**kw)


def test_t0_from_fraction(tiny_schedule):
    assert PerturbSpec(t0_frac=0.5).t0(tiny_schedule) == 25
    assert PerturbSpec(t0_frac=0.001).t0(tiny_schedule) == 1


@pytest.fixture(scope="module")
def probe():
    torch.manual_seed(0)
    return ProbeClassifier.from_net(ProbeNet(ProbeConfig(8, 16, 4)), clean_accuracy=1.0)


def _images(seed, n=4):
    return np.random.default_rng(seed).uniform(0, 1, (n, 3, 8, 8)).astype(np.float32)


def test_regeneration_deterministic(tiny_denoiser, tiny_schedule):
    spec = PerturbSpec(t0_frac=0.2, deltas=(0.0, 1.0), seed=3)
    a = generate_perturbed(_images(0), spec, tiny_denoiser, tiny_schedule)
    b = generate_perturbed(_images(0), spec, tiny_denoiser, tiny_schedule)
    assert len(a) == 2 and all(np.array_equal(p, q) for p, q in zip(a, b))
    assert a[0].min() >= 0 and a[0].max() <= 1
    assert not np.array_equal(a[0], a[1])


def test_sweep_table_with_gaps(tmp_path, tiny_denoiser, tiny_schedule, probe):
    spec = PerturbSpec(t0_frac=0.1, deltas=(0.0, 2.0))
    conds = {"clean": _images(1), "degraded": _images(2), "restored_with": None}
    rows = feature_distance_sweep(conds, spec, tiny_denoiser, tiny_schedule, probe, out_dir=tmp_path)
    assert len(rows) == 8
    got = {(r["condition"], r["delta"]): r for r in rows}
    assert got[("restored_with", 2.0)]["mean_dist"] is None and got[("restored_without", 0.0)]["n"] == 0
    assert got[("clean", 0.0)]["n"] == 4 and got[("clean", 2.0)]["mean_dist"] >= 0
    with open(tmp_path / "hspace_distances.csv") as fh:
        table = list(csv.DictReader(fh))
    assert tuple(table[0]) == CSV_COLUMNS and len(table) == 8
    assert (tmp_path / "hspace_histogram.png").stat().st_size > 0
