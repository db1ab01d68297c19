"""Latent-space UNet denoiser: residual conv blocks with timestep
scale-shift, conditioned transformer stacks at selected resolutions, and a
zero-initialized layout-feature injection after each stack.

At initialization every gate is 0 and every injection conv is zero, so the
prediction is independent of the layout condition; conditioning fades in
during training.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .attention import TransformerBlock
from .config import DenoiserConfig

Tensor = torch.Tensor


def sinusoidal_timestep_embedding(t: Tensor | int, dim: int) -> Tensor:
    """Interleaved (sin, cos) embedding of the integer step.

    Frequencies follow the standard ladder 10000^(-2i/dim), so the first
    pair is (sin t, cos t). `dim` must be even; t must be >= 1.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    scalar = not torch.is_tensor(t)
    tt = torch.as_tensor(t, dtype=torch.get_default_dtype()).reshape(-1)
    if bool((tt < 1).any()):
        raise ValueError("timestep must be >= 1")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * 2.0 * torch.arange(half, dtype=tt.dtype) / dim
    )
    angles = tt[:, None] * freqs[None, :]
    emb = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1).reshape(-1, dim)
    return emb.squeeze(0) if scalar else emb


class TimestepEmbedding(nn.Module):
    """Sinusoidal encoding followed by a learned two-layer projection."""

    def __init__(self, sinusoid_dim: int, out_dim: int):
        super().__init__()
        self.sinusoid_dim = sinusoid_dim
        self.net = nn.Sequential(
            nn.Linear(sinusoid_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim)
        )

    def forward(self, t: Tensor | int) -> Tensor:
        emb = sinusoidal_timestep_embedding(t, self.sinusoid_dim)
        return self.net(emb.to(self.net[0].weight.dtype))


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, 2 * out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: Tensor, t_emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        scale, shift = self.time_proj(F.silu(t_emb))[:, :, None, None].chunk(2, dim=1)
        h = self.norm2(h) * (1.0 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class LayoutInjection(nn.Module):
    """Zero-initialized 1x1 projection of the layout feature, resized to the
    target resolution and added after an attention stack."""

    def __init__(self, layout_dim: int, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(layout_dim, channels, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, layout_feature: Tensor, size: tuple[int, int]) -> Tensor:
        out = self.proj(layout_feature)
        if out.shape[-2:] != size:
            out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
        return out


class SpatialTransformer(nn.Module):
    """Token-space transformer over a feature map plus layout injection."""

    def __init__(self, channels: int, layout_dim: int, text_dim: int, cfg: DenoiserConfig):
        super().__init__()
        self.block = TransformerBlock(
            channels, layout_dim, text_dim, cfg.heads, cfg.gate_scale, cfg.ff_mult
        )
        self.inject = LayoutInjection(layout_dim, channels)

    def forward(self, x: Tensor, layout_tokens: Tensor, layout_feature: Tensor, text: Tensor) -> Tensor:
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        tokens = self.block(tokens, layout_tokens, text)
        x = tokens.transpose(1, 2).reshape(b, c, h, w)
        return x + self.inject(layout_feature, (h, w))


class DenoiserUNet(nn.Module):
    def __init__(
        self,
        in_channels: int,
        layout_dim: int,
        text_dim: int,
        cfg: DenoiserConfig = DenoiserConfig(),
        max_timestep: int | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        self.in_channels = in_channels
        self.max_timestep = max_timestep
        widths = cfg.widths
        time_dim = widths[0] * 4
        self.time_embed = TimestepEmbedding(widths[0], time_dim)
        self.conv_in = nn.Conv2d(in_channels, widths[0], 3, padding=1)

        def attn(ch: int) -> SpatialTransformer:
            return SpatialTransformer(ch, layout_dim, text_dim, cfg)

        self.down_blocks = nn.ModuleList()
        self.down_attns = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        ch = widths[0]
        self.skip_channels = [ch]
        for level, w in enumerate(widths):
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks):
                blocks.append(ResidualBlock(ch, w, time_dim))
                attns.append(attn(w) if level in cfg.attn_levels else None)
                ch = w
                self.skip_channels.append(ch)
            self.down_blocks.append(blocks)
            self.down_attns.append(attns)
            if level < len(widths) - 1:
                self.downsamples.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                self.skip_channels.append(ch)

        self.mid_block1 = ResidualBlock(ch, ch, time_dim)
        self.mid_attn = attn(ch)
        self.mid_block2 = ResidualBlock(ch, ch, time_dim)

        self.up_blocks = nn.ModuleList()
        self.up_attns = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        skip = list(self.skip_channels)
        for level in reversed(range(len(widths))):
            w = widths[level]
            blocks, attns = nn.ModuleList(), nn.ModuleList()
            for _ in range(cfg.res_blocks + 1):
                blocks.append(ResidualBlock(ch + skip.pop(), w, time_dim))
                attns.append(attn(w) if level in cfg.attn_levels else None)
                ch = w
            self.up_blocks.append(blocks)
            self.up_attns.append(attns)
            if level > 0:
                self.upsamples.append(nn.Conv2d(ch, ch, 3, padding=1))

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = nn.Conv2d(ch, in_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(
        self,
        z_t: Tensor,
        t: Tensor | int,
        layout_tokens: Tensor,
        layout_feature: Tensor,
        text_tokens: Tensor,
    ) -> Tensor:
        """Predict the noise component of z_t; output has z_t's shape."""
        batched = z_t.dim() == 4
        if not batched:
            z_t = z_t.unsqueeze(0)
            if layout_tokens.dim() == 2:
                layout_tokens = layout_tokens.unsqueeze(0)
            if layout_feature.dim() == 3:
                layout_feature = layout_feature.unsqueeze(0)
        b = z_t.shape[0]
        if z_t.shape[1] != self.in_channels:
            raise ValueError(f"latent has {z_t.shape[1]} channels, expected {self.in_channels}")
        if self.max_timestep is not None:
            tt = torch.as_tensor(t)
            if bool((tt < 1).any()) or bool((tt > self.max_timestep).any()):
                raise ValueError(f"timestep {t} outside [1, {self.max_timestep}]")
        if layout_tokens.dim() == 2:
            layout_tokens = layout_tokens.unsqueeze(0).expand(b, -1, -1)
        if layout_feature.dim() == 3:
            layout_feature = layout_feature.unsqueeze(0).expand(b, -1, -1, -1)
        if text_tokens.dim() == 2:
            text_tokens = text_tokens.unsqueeze(0).expand(b, -1, -1)
        if layout_tokens.shape[0] != b or layout_feature.shape[0] != b:
            raise ValueError("conditions and latent batch sizes disagree")

        t_emb = self.time_embed(t)
        if t_emb.dim() == 1:
            t_emb = t_emb.unsqueeze(0).expand(b, -1)
        elif t_emb.shape[0] != b:
            raise ValueError(f"got {t_emb.shape[0]} timesteps for batch of {b}")

        def run_attn(attn, x):
            return attn(x, layout_tokens, layout_feature, text_tokens) if attn is not None else x

        x = self.conv_in(z_t)
        skips = [x]
        for level in range(len(self.cfg.widths)):
            for block, attn in zip(self.down_blocks[level], self.down_attns[level]):
                x = run_attn(attn, block(x, t_emb))
                skips.append(x)
            if level < len(self.cfg.widths) - 1:
                x = self.downsamples[level](x)
                skips.append(x)

        x = self.mid_block1(x, t_emb)
        x = self.mid_attn(x, layout_tokens, layout_feature, text_tokens)
        x = self.mid_block2(x, t_emb)

        for i, level in enumerate(reversed(range(len(self.cfg.widths)))):
            for block, attn in zip(self.up_blocks[i], self.up_attns[i]):
                x = torch.cat([x, skips.pop()], dim=1)
                x = run_attn(attn, block(x, t_emb))
            if level > 0:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
                x = self.upsamples[i](x)

        out = self.conv_out(F.silu(self.norm_out(x)))
        return out if batched else out.squeeze(0)

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """'conditioning' = gated attention layers (with their norms) and
        layout injections; 'backbone' = everything else."""
        conditioning: list[nn.Parameter] = []
        cond_ids = set()
        for module in self.modules():
            if isinstance(module, TransformerBlock):
                for p in module.conditioning_parameters():
                    conditioning.append(p)
                    cond_ids.add(id(p))
            elif isinstance(module, LayoutInjection):
                for p in module.parameters():
                    conditioning.append(p)
                    cond_ids.add(id(p))
        backbone = [p for p in self.parameters() if id(p) not in cond_ids]
        return {"backbone": backbone, "conditioning": conditioning}


def predict_noise(
    z_t: Tensor,
    t: Tensor | int,
    layout_tokens: Tensor,
    layout_feature: Tensor,
    text_tokens: Tensor,
    model: DenoiserUNet,
) -> Tensor:
    """Functional alias for the denoiser forward pass."""
    return model(z_t, t, layout_tokens, layout_feature, text_tokens)
