import numpy as np
import pytest
import torch

from exprsynth.denoiser import DenoiserConfig, UNetDenoiser
from exprsynth.faceprior import FauPriorTable
from exprsynth.schedule import NoiseSchedule


def pytest_configure(config):
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_cfg() -> DenoiserConfig:
    """Smallest denoiser that still exercises every architectural path."""
    return DenoiserConfig(
        image_size=16, channels=(4, 8), blocks_per_level=1,
        cond_dim=8, text_len=4, au_tokens=2, time_dim=8,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg) -> UNetDenoiser:
    torch.manual_seed(0)
    model = UNetDenoiser(tiny_cfg)
    model.eval()
    return model


@pytest.fixture(scope="session")
def live_model(tiny_cfg) -> UNetDenoiser:
    """Tiny model whose output depends on its conditioning: the zero-init
    output convolution is given random weights."""
    torch.manual_seed(1)
    model = UNetDenoiser(tiny_cfg)
    torch.nn.init.normal_(model.out_conv.weight, std=0.1)
    torch.nn.init.normal_(model.out_conv.bias, std=0.01)
    model.eval()
    return model


@pytest.fixture(scope="session")
def sched8() -> NoiseSchedule:
    return NoiseSchedule.cosine(8)


@pytest.fixture(scope="session")
def table() -> FauPriorTable:
    return FauPriorTable()


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
