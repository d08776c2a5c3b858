import numpy as np
import pytest
import torch

from pvseg.data_synth import SynthConfig, generate_clip
from pvseg.model import ModelConfig, PvsModel


@pytest.fixture(scope="session")
def tiny_model() -> PvsModel:
    """Default architecture, fixed init; shared read-only across tests."""
    torch.manual_seed(0)
    model = PvsModel(ModelConfig())
    model.eval()
    return model


@pytest.fixture(scope="session")
def small_clip():
    """4-frame 32x32 single-disk clip (fast to push through the model)."""
    cfg = SynthConfig(num_frames=4, height=32, width=32, num_objects=1)
    return generate_clip(cfg, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
