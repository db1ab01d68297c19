"""Dataclass configs describing the model family and how to build one."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Any


@dataclass(frozen=True)
class AutoencoderConfig:
    """Convolutional image autoencoder operating in pixel space."""

    downscale: int = 4  # spatial factor f between image and latent
    latent_channels: int = 4
    base_channels: int = 32

    def __post_init__(self) -> None:
        if self.downscale < 2 or self.downscale & (self.downscale - 1):
            raise ValueError(f"downscale must be a power of two >= 2, got {self.downscale}")
        if self.latent_channels < 1 or self.base_channels < 1:
            raise ValueError("latent_channels and base_channels must be positive")


@dataclass(frozen=True)
class ConditioningConfig:
    """Layout encoder, layout token grid, and learned text condition."""

    stride: int = 4  # total stride s of the layout encoder
    layout_channels: int = 64  # d_l
    base_channels: int = 32
    text_tokens: int = 4  # n_c
    text_channels: int = 64  # d_c

    def __post_init__(self) -> None:
        if self.stride < 2 or self.stride & (self.stride - 1):
            raise ValueError(f"stride must be a power of two >= 2, got {self.stride}")
        for name in ("layout_channels", "base_channels", "text_tokens", "text_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class DenoiserConfig:
    """Latent-space UNet denoiser with conditioned attention stacks."""

    widths: tuple[int, ...] = (64, 128, 256)
    res_blocks: int = 2
    attn_levels: tuple[int, ...] = (1, 2)  # 0 = full latent resolution
    heads: int = 1
    gate_scale: float = 1.0  # the gate multiplier applied on top of tanh(gate)
    ff_mult: int = 4

    def __post_init__(self) -> None:
        if not self.widths or any(w < 1 for w in self.widths):
            raise ValueError("widths must be a non-empty tuple of positive ints")
        if any(level < 0 or level >= len(self.widths) for level in self.attn_levels):
            raise ValueError(f"attn_levels {self.attn_levels} out of range for {len(self.widths)} levels")
        if self.res_blocks < 1 or self.heads < 1 or self.ff_mult < 1:
            raise ValueError("res_blocks, heads and ff_mult must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    """Linear variance schedule for the latent noising process.

    The desk-scale default shortens the common 1000-step (1e-4, 0.02) table
    to 200 steps while keeping the terminal signal level comparable, which
    is why beta_end is raised to 0.1.
    """

    steps: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.1

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got ({self.beta_start}, {self.beta_end})"
            )


@dataclass(frozen=True)
class ModelConfig:
    """Full model family: autoencoder, conditioning path, denoiser, schedule."""

    resolution: int = 64
    autoencoder: AutoencoderConfig = field(default_factory=AutoencoderConfig)
    conditioning: ConditioningConfig = field(default_factory=ConditioningConfig)
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)

    def __post_init__(self) -> None:
        if self.resolution % self.autoencoder.downscale:
            raise ValueError(
                f"resolution {self.resolution} not divisible by downscale {self.autoencoder.downscale}"
            )
        if self.resolution % self.conditioning.stride:
            raise ValueError(
                f"resolution {self.resolution} not divisible by layout stride {self.conditioning.stride}"
            )

    @property
    def latent_size(self) -> int:
        return self.resolution // self.autoencoder.downscale

    @property
    def layout_grid(self) -> tuple[int, int]:
        side = self.resolution // self.conditioning.stride
        return (side, side)

    @property
    def n_layout_tokens(self) -> int:
        h, w = self.layout_grid
        return h * w


def config_to_dict(cfg: Any) -> dict:
    """Serialize a (possibly nested) config dataclass to plain JSON-able types."""
    return dataclasses.asdict(cfg)


def _build(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name in _NESTED and isinstance(value, dict):
            kwargs[f.name] = _build(_NESTED[f.name], value)
        elif isinstance(value, list):
            kwargs[f.name] = tuple(value)
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


_NESTED = {
    "autoencoder": AutoencoderConfig,
    "conditioning": ConditioningConfig,
    "denoiser": DenoiserConfig,
    "schedule": ScheduleConfig,
}


def model_config_from_dict(data: dict) -> ModelConfig:
    """Rebuild a ModelConfig from the dict produced by config_to_dict."""
    return _build(ModelConfig, data)
