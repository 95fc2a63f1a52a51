"""Shared fixtures: tiny models and hand-built posterior fields."""

import numpy as np
import pytest
import torch

from target_vae.config.settings import FourierFeatureConfig, ModelConfig, PriorConfig
from target_vae.core.encoder import PosteriorField
from target_vae.core.model import TargetVAE


def tiny_config(**overrides) -> ModelConfig:
    settings = dict(
        image_height=9,
        image_width=9,
        r=4,
        z_dim=2,
        first_kernel_size=3,
        channels=4,
        n_pointwise_layers=2,
        generator_layers=3,
        hidden_units=16,
        fourier=FourierFeatureConfig(n_freq=4),
    )
    settings.update(overrides)
    return ModelConfig(**settings)


def random_field(b=2, r=2, h=3, w=3, z_dim=2, seed=0, dtype=torch.float64) -> PosteriorField:
    gen = torch.Generator().manual_seed(seed)

    def draw(*shape, low=-1.0, high=1.0):
        return low + (high - low) * torch.rand(*shape, generator=gen, dtype=dtype)

    return PosteriorField(
        attn_logits=draw(b, r, h, w, low=-2.0, high=2.0),
        mu_z=draw(b, r, h, w, z_dim),
        log_sigma_z=draw(b, r, h, w, z_dim),
        mu_dtheta=draw(b, r, h, w),
        log_sigma_theta=draw(b, r, h, w),
    )


@pytest.fixture
def model_config():
    return tiny_config()


@pytest.fixture
def tiny_model(model_config):
    torch.manual_seed(0)
    return TargetVAE(model_config, PriorConfig())


@pytest.fixture
def tiny_model64(model_config):
    torch.manual_seed(0)
    return TargetVAE(model_config, PriorConfig()).double()


@pytest.fixture
def tiny_images():
    rng = np.random.default_rng(0)
    images = np.zeros((8, 1, 9, 9), dtype=np.float32)
    images[:, :, 3:6, 2:7] = rng.uniform(0.5, 1.0, size=(8, 1, 3, 5))
    return images
