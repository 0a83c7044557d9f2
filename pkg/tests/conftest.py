import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from difflosslab.denoiser import Denoiser, DenoiserConfig, freeze
from difflosslab.diffusion import make_linear_schedule

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY = DenoiserConfig(resolution=8, base_channels=8, depth=2, time_embed_dim=16, h_channels=16)


@pytest.fixture(scope="session")
def tiny_schedule():
    return make_linear_schedule(50, 1e-3, 0.2)


@pytest.fixture(scope="session")
def tiny_denoiser():
    torch.manual_seed(0)
    return freeze(Denoiser(TINY))


@pytest.fixture(scope="session")
def tiny_denoiser64():
    torch.manual_seed(0)
    return freeze(Denoiser(TINY)).to(torch.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
