import pytest
import torch

import diffcloak as dc


@pytest.fixture(scope="session")
def tiny_model():
    """Untrained 16px model with a short schedule, for mechanics tests."""
    cfg = dc.ModelConfig(image_size=16, base_channels=8, embed_dim=16)
    return dc.NoisePredictor(cfg, dc.build_linear_schedule(50), seed=11)


@pytest.fixture(scope="session")
def tiny_images():
    return dc.generate_identity_images(dc.Identity(0, 7), 4, 0, image_size=16)


@pytest.fixture()
def instance_prompt(tiny_model):
    return tiny_model.encode_prompt(dc.tokenize("a photo of sks person"))


def shrunken_model(dtype=torch.float64, timesteps=20, seed=3):
    """8x8 / d=8 model used for finite-difference gradient checks."""
    cfg = dc.ModelConfig(image_size=8, base_channels=8, embed_dim=8)
    model = dc.NoisePredictor(cfg, dc.build_linear_schedule(timesteps), seed=seed)
    return model.to(dtype)
