import numpy as np
import pytest

from bdk.cli import default_checkpoint
from bdk.noise_model import init_predictor, load_checkpoint
from bdk.schedule import make_desk_schedule
from bdk.synth_data import SpriteConfig, generate_sprite_dataset

# filled by tests/test_acceptance.py, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def toy():
    """The packaged trained checkpoint: ``(predictor, schedule)``."""
    return load_checkpoint(default_checkpoint())


@pytest.fixture(scope="session")
def sprites():
    """Sprites from a seed the toy model never saw in training."""
    return generate_sprite_dataset(SpriteConfig(seed=3), 500)


@pytest.fixture
def tiny():
    """Small untrained predictor on d=16 with a 40-step chain."""
    model = init_predictor((16, 24, 6, 24, 16), time_embed_dim=6, seed=1, time_horizon=40)
    return model, make_desk_schedule(40)


@pytest.fixture
def gen():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
