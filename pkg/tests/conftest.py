"""Shared fixtures: tiny configs sized so unit tests stay fast on CPU."""

import pytest
import torch

from updiff.config import (
    AutoencoderConfig,
    ConditioningConfig,
    DenoiserConfig,
    ModelConfig,
    ScheduleConfig,
)


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(2)


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        resolution=16,
        autoencoder=AutoencoderConfig(downscale=4, latent_channels=4, base_channels=8),
        conditioning=ConditioningConfig(
            stride=4, layout_channels=8, base_channels=8, text_tokens=2, text_channels=8
        ),
        denoiser=DenoiserConfig(widths=(8, 16), res_blocks=1, attn_levels=(1,), heads=1),
        schedule=ScheduleConfig(steps=10, beta_start=1e-4, beta_end=0.1),
    )
