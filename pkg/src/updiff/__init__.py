"""Conditional latent diffusion for urban-layout prediction: given a
pre-change aerial image and a planned change map, generate the post-change
image. Ships training (two stages), sampling, evaluation, and an HTTP
inference service.
"""

from .config import (
    AutoencoderConfig,
    ConditioningConfig,
    DenoiserConfig,
    ModelConfig,
    ScheduleConfig,
)
from .schedule import Latent, NoiseSchedule, forward_sample, make_linear_schedule, reverse_step

__all__ = [
    "AutoencoderConfig",
    "ConditioningConfig",
    "DenoiserConfig",
    "ModelConfig",
    "ScheduleConfig",
    "Latent",
    "NoiseSchedule",
    "forward_sample",
    "make_linear_schedule",
    "reverse_step",
]
