"""Condition construction: the layout feature from (pre-change image,
change map), its position-embedded token form, and the learned text tokens.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .config import ConditioningConfig

Tensor = torch.Tensor


def tokenize_layout(feature: Tensor, position_embedding: Tensor) -> Tensor:
    """Flatten a (d, h, w) feature map row-major into (h*w, d) tokens and add
    the trainable position embedding. Batched (b, d, h, w) input gives
    (b, h*w, d)."""
    batched = feature.dim() == 4
    if not batched:
        feature = feature.unsqueeze(0)
    b, d, h, w = feature.shape
    if position_embedding.shape != (h * w, d):
        raise ValueError(
            f"position embedding shape {tuple(position_embedding.shape)} does not match "
            f"{h}x{w} feature with {d} channels (expected ({h * w}, {d}))"
        )
    tokens = feature.flatten(2).transpose(1, 2) + position_embedding
    return tokens if batched else tokens.squeeze(0)


class LayoutEncoder(nn.Module):
    """Strided conv encoder over the 4-channel (image, mask) concatenation.

    log2(stride) stride-2 stages followed by a 3x3 projection to the layout
    channel count. `bias=False` yields the linear variant where an all-zero
    input maps to an all-zero feature.
    """

    def __init__(
        self,
        stride: int = 4,
        out_channels: int = 64,
        base_channels: int = 32,
        in_channels: int = 4,
        bias: bool = True,
    ):
        super().__init__()
        if stride < 2 or stride & (stride - 1):
            raise ValueError(f"stride must be a power of two >= 2, got {stride}")
        self.stride = stride
        self.out_channels = out_channels
        layers: list[nn.Module] = []
        ch = in_channels
        for i in range(int(math.log2(stride))):
            nxt = base_channels * (2**i)
            layers += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1, bias=bias), nn.SiLU()]
            ch = nxt
        layers.append(nn.Conv2d(ch, out_channels, 3, padding=1, bias=bias))
        self.net = nn.Sequential(*layers)

    def forward(self, image: Tensor, mask: Tensor) -> Tensor:
        batched = image.dim() == 4
        if not batched:
            image, mask = image.unsqueeze(0), mask.unsqueeze(0)
        if image.shape[-2:] != mask.shape[-2:] or image.shape[0] != mask.shape[0]:
            raise ValueError(
                f"image {tuple(image.shape)} and change map {tuple(mask.shape)} are not aligned"
            )
        h, w = image.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"spatial dims ({h}, {w}) not divisible by stride {self.stride}")
        out = self.net(torch.cat([image, mask], dim=1))
        return out if batched else out.squeeze(0)


class Conditioner(nn.Module):
    """Bundles the layout encoder, the trainable position embedding for the
    layout tokens, and the learned constant text tokens.

    The text tokens stand in for a frozen text encoder applied to one fixed
    prompt, so they sit in the backbone (freezable) parameter group; the
    layout path is the conditioning group.
    """

    def __init__(self, cfg: ConditioningConfig, resolution: int):
        super().__init__()
        if resolution % cfg.stride:
            raise ValueError(f"resolution {resolution} not divisible by stride {cfg.stride}")
        self.cfg = cfg
        side = resolution // cfg.stride
        self.token_grid = (side, side)
        self.encoder = LayoutEncoder(cfg.stride, cfg.layout_channels, cfg.base_channels)
        self.position_embedding = nn.Parameter(
            0.02 * torch.randn(side * side, cfg.layout_channels)
        )
        self.text_tokens_param = nn.Parameter(0.02 * torch.randn(cfg.text_tokens, cfg.text_channels))

    def layout_feature(self, image: Tensor, mask: Tensor) -> Tensor:
        return self.encoder(image, mask)

    def layout_tokens(self, feature: Tensor) -> Tensor:
        h, w = feature.shape[-2:]
        pe = self.position_embedding
        if (h, w) != self.token_grid:
            pe = self._resize_position_embedding(h, w)
        return tokenize_layout(feature, pe)

    def _resize_position_embedding(self, h: int, w: int) -> Tensor:
        # Inference at a non-native (but divisible) resolution: interpolate
        # the embedding over the token grid.
        h0, w0 = self.token_grid
        grid = self.position_embedding.T.reshape(1, self.cfg.layout_channels, h0, w0)
        grid = F.interpolate(grid, size=(h, w), mode="bilinear", align_corners=False)
        return grid.reshape(self.cfg.layout_channels, h * w).T

    def text_condition(self) -> Tensor:
        """The model's constant text-condition token matrix."""
        return self.text_tokens_param

    def conditions(self, image: Tensor, mask: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """(layout tokens, layout feature, text tokens) for one batch."""
        feat = self.layout_feature(image, mask)
        return self.layout_tokens(feat), feat, self.text_condition()

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "backbone": [self.text_tokens_param],
            "conditioning": list(self.encoder.parameters()) + [self.position_embedding],
        }


def embed_layout(image: Tensor, mask: Tensor, encoder: LayoutEncoder) -> Tensor:
    """Functional alias: encode the (image, change map) pair to the layout feature."""
    return encoder(image, mask)
