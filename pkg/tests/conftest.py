import numpy as np
import pytest
import torch

from pokefusion.data import generate_dataset
from pokefusion.model import DenoiserConfig

torch.set_num_threads(1)


def tiny_config(**kw) -> DenoiserConfig:
    base = dict(d=8, heads=2, decoder_blocks=1, channels=(8,), latent_size=4, max_tokens=4,
                style_dim=32, timesteps=20, ffn_mult=2)
    base.update(kw)
    return DenoiserConfig(**base)


def small_config(**kw) -> DenoiserConfig:
    """Full 16x16 latent, narrow widths: cheap but runs on real sprites."""
    base = dict(d=16, heads=2, decoder_blocks=2, channels=(8, 16), timesteps=20)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture(scope="session")
def small_ds():
    return generate_dataset(48, 2, 3)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, repeated at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
