import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from difflosslab.estimators import DiffLossRestorer, ToyDDPM
from difflosslab.metrics import psnr
from difflosslab.synthdata import DegradationSpec, ShapesDatasetSpec, make_paired_arrays


@pytest.fixture(scope="module")
def data():
    y, x, _ = make_paired_arrays(ShapesDatasetSpec(n_images=32, resolution=8), DegradationSpec("noise", seed=1))
    return y, x


@pytest.fixture(scope="module")
def ddpm(data):
    return ToyDDPM(T=20, beta_start=1e-3, beta_end=0.2, base_channels=8, depth=2, time_embed_dim=16,
                   h_channels=16, max_steps=10, batch_size=8, seed=0).fit(data[1])


def test_toy_ddpm_fit_sample_score(ddpm, data):
    assert len(ddpm.loss_curve_) == 10
    s = ddpm.sample(3, seed=1)
    assert s.shape == (3, 3, 8, 8) and s.min() >= 0 and s.max() <= 1
    assert np.array_equal(s, ddpm.sample(3, seed=1))
    assert ddpm.score(data[1]) < 0


def test_toy_ddpm_clone_and_unfitted():
    est = ToyDDPM(T=10)
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.sample(1)


def test_restorer_pixel_only(data):
    y, x = data
    est = DiffLossRestorer(base_channels=4, depth=2, max_steps=20, batch_size=8, lr=1e-2).fit(y, x)
    out = est.predict(y)
    assert out.shape == y.shape and out.min() >= 0 and out.max() <= 1
    assert est.score(y, x) == pytest.approx(psnr(out, x, cap=100.0))
    assert np.array_equal(est.transform(y), out)
    again = clone(est).fit(y, x)
    assert np.array_equal(again.predict(y), out)


def test_restorer_with_diffloss(data, ddpm):
    from difflosslab.denoiser import freeze

    y, x = data
    den = freeze(ddpm.denoiser_)
    est = DiffLossRestorer(base_channels=4, depth=2, denoiser=den, schedule=ddpm.schedule_, gamma=0.5,
                           max_steps=5, batch_size=8, lr=1e-3).fit(y, x)
    assert all(r["l_diff"] > 0 for r in est.log_)
    with pytest.raises(TypeError):
        DiffLossRestorer(denoiser=ddpm.denoiser_, schedule=ddpm.schedule_, max_steps=1).fit(y, x)
