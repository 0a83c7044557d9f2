"""scikit-learn style wrappers around the two training loops."""

from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .denoiser import Denoiser, DenoiserConfig, FrozenDenoiser
from .diffloss import DiffLossConfig
from .diffusion import NoiseSchedule, make_linear_schedule, sample
from .metrics import psnr
from .restorer import RestorerConfig, build_restorer
from .seeding import set_global_seed
from .trainer import ddpm_training_loop, heldout_ddpm_loss, restoration_training_loop, restore_array
from .validation import check_images, check_same_shape, symmetric_to_unit, unit_to_symmetric


class ToyDDPM(BaseEstimator):
    """Noise-prediction DDPM on unit-range images.

    ``fit(X)`` trains on clean images, ``sample(n)`` draws new ones and
    ``score(X)`` is the negative held-out L1 noise-prediction loss.
    """

    def __init__(self, T=1000, beta_start=1e-4, beta_end=0.02, base_channels=64, depth=3, time_embed_dim=128,
                 h_channels=128, max_steps=20_000, batch_size=16, lr=2e-4, seed=0):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.base_channels = base_channels
        self.depth = depth
        self.time_embed_dim = time_embed_dim
        self.h_channels = h_channels
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def fit(self, X, y=None):
        X = check_images(X, "unit", allow_empty=False)
        self.schedule_ = make_linear_schedule(self.T, self.beta_start, self.beta_end)
        cfg = DenoiserConfig(resolution=X.shape[-1], base_channels=self.base_channels, depth=self.depth,
                             time_embed_dim=self.time_embed_dim, h_channels=self.h_channels)
        self._rngs = set_global_seed(self.seed)
        self.denoiser_ = self._rngs.init_module(Denoiser, cfg)
        state, _ = ddpm_training_loop(self.denoiser_, self.schedule_, unit_to_symmetric(torch.from_numpy(X)),
                                      self._rngs, max_steps=self.max_steps, batch_size=self.batch_size, lr=self.lr)
        self.loss_curve_ = [r["loss"] for r in state.rows]
        return self

    def sample(self, n: int, seed: int | None = None) -> np.ndarray:
        check_is_fitted(self, "denoiser_")
        r = self.denoiser_.config.resolution
        gen = torch.Generator().manual_seed(self.seed if seed is None else seed)
        return symmetric_to_unit(sample(self.denoiser_, self.schedule_, (n, 3, r, r), gen)).numpy()

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "denoiser_")
        X = check_images(X, "unit", allow_empty=False)
        return -heldout_ddpm_loss(self.denoiser_, unit_to_symmetric(torch.from_numpy(X)), self.schedule_,
                                  set_global_seed(self.seed))


class DiffLossRestorer(RegressorMixin, TransformerMixin, BaseEstimator):
    """Restoration network trained with pixel MSE plus (optionally) DiffLoss.

    ``fit(Y, X)`` maps degraded ``Y`` to clean ``X``; ``predict``/``transform``
    restore new inputs; ``score`` is the mean PSNR in dB. Pass
    ``denoiser=None`` (or ``gamma=0`` with a denoiser) for the pixel-only arm.
    """

    def __init__(self, arch="plain_cnn", base_channels=32, depth=5, param_budget=None, denoiser=None,
                 schedule=None, gamma=0.001, lambda_sem=0.01, variant="epsilon", weight_mode="constant",
                 max_steps=5_000, batch_size=16, lr=1e-4, seed=0):
        self.arch = arch
        self.base_channels = base_channels
        self.depth = depth
        self.param_budget = param_budget
        self.denoiser = denoiser
        self.schedule = schedule
        self.gamma = gamma
        self.lambda_sem = lambda_sem
        self.variant = variant
        self.weight_mode = weight_mode
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed

    def _diffloss(self) -> DiffLossConfig | None:
        if self.denoiser is None:
            return None
        if not isinstance(self.denoiser, FrozenDenoiser) or not isinstance(self.schedule, NoiseSchedule):
            raise TypeError("denoiser must be a FrozenDenoiser and schedule its NoiseSchedule")
        return DiffLossConfig(lambda_sem=self.lambda_sem, gamma=self.gamma, variant=self.variant,
                              weight_mode=self.weight_mode)

    def fit(self, Y, X):
        Y = check_images(Y, "unit", allow_empty=False)
        X = check_images(X, "unit", allow_empty=False)
        check_same_shape(Y, X, ("Y", "X"))
        dl = self._diffloss()
        rngs = set_global_seed(self.seed)
        self.model_ = rngs.init_module(build_restorer, RestorerConfig(self.arch, self.base_channels, self.depth,
                                                                      self.param_budget))
        state, _ = restoration_training_loop(
            self.model_, torch.from_numpy(Y), torch.from_numpy(X), rngs, max_steps=self.max_steps,
            batch_size=self.batch_size, lr=self.lr, denoiser=self.denoiser, schedule=self.schedule, diffloss=dl,
        )
        self.log_ = state.rows
        return self

    def predict(self, Y) -> np.ndarray:
        check_is_fitted(self, "model_")
        return restore_array(self.model_, check_images(Y, "unit"))

    def transform(self, Y) -> np.ndarray:
        return self.predict(Y)

    def score(self, Y, X) -> float:
        return psnr(self.predict(Y), check_images(X, "unit"), cap=100.0)
