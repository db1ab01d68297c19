"""Pixel-space autoencoder bounding the latent diffusion, and its
reconstruction training (stage 1).

After training, a scalar latent scale (1/std over training latents) is
folded into encode/decode so clean latents are near unit variance; it is a
buffer and travels with the checkpoint.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import AutoencoderConfig

Tensor = torch.Tensor


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


class ImageAutoencoder(nn.Module):
    def __init__(self, cfg: AutoencoderConfig = AutoencoderConfig()):
        super().__init__()
        self.cfg = cfg
        stages = int(math.log2(cfg.downscale))
        enc: list[nn.Module] = []
        ch = 3
        for i in range(stages):
            nxt = cfg.base_channels * (2**i)
            enc += [
                nn.Conv2d(ch, nxt, 3, padding=1),
                nn.SiLU(),
                nn.Conv2d(nxt, nxt, 3, stride=2, padding=1),
                nn.SiLU(),
            ]
            ch = nxt
        enc.append(nn.Conv2d(ch, cfg.latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*enc)

        dec: list[nn.Module] = [nn.Conv2d(cfg.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for i in reversed(range(stages)):
            nxt = cfg.base_channels * (2 ** max(i - 1, 0)) if i > 0 else cfg.base_channels
            dec += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, nxt, 3, padding=1),
                nn.SiLU(),
            ]
            ch = nxt
        dec += [nn.Conv2d(ch, 3, 3, padding=1), nn.Tanh()]
        self.decoder = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    @property
    def downscale(self) -> int:
        return self.cfg.downscale

    def encode(self, image: Tensor) -> Tensor:
        """Image (3, H, W) or batch -> scaled clean latent (c_z, H/f, W/f)."""
        h, w = image.shape[-2:]
        if h % self.cfg.downscale or w % self.cfg.downscale:
            raise ValueError(f"image dims ({h}, {w}) not divisible by {self.cfg.downscale}")
        batched = image.dim() == 4
        out = self.encoder(image if batched else image.unsqueeze(0)) * self.latent_scale
        return out if batched else out.squeeze(0)

    def decode(self, z: Tensor) -> Tensor:
        """Latent -> image in [-1, 1] (tanh-squashed)."""
        if z.shape[-3] != self.cfg.latent_channels:
            raise ValueError(
                f"latent has {z.shape[-3]} channels, expected {self.cfg.latent_channels}"
            )
        batched = z.dim() == 4
        out = self.decoder((z if batched else z.unsqueeze(0)) / self.latent_scale)
        return out if batched else out.squeeze(0)

    def reconstruct(self, image: Tensor) -> Tensor:
        return self.decode(self.encode(image))


@dataclass
class AutoencoderTrainResult:
    model: ImageAutoencoder
    initial_val_loss: float
    final_val_loss: float
    steps: int
    seconds: float
    history: list[tuple[int, float]] = field(repr=False, default_factory=list)


def fit_latent_scale(model: ImageAutoencoder, images: Tensor, chunk: int = 64) -> float:
    """Set latent_scale = 1/std of raw training latents; returns the std."""
    model.latent_scale.fill_(1.0)
    total = 0
    s1 = torch.zeros((), dtype=torch.float64)
    s2 = torch.zeros((), dtype=torch.float64)
    with torch.no_grad():
        for start in range(0, images.shape[0], chunk):
            z = model.encode(images[start : start + chunk]).double()
            total += z.numel()
            s1 += z.sum()
            s2 += (z * z).sum()
    mean = s1 / total
    std = float(torch.sqrt(torch.clamp(s2 / total - mean * mean, min=0.0)))
    if not (std > 0 and math.isfinite(std)):
        raise TrainingDivergedError(f"degenerate latent std {std}")
    model.latent_scale.fill_(1.0 / std)
    return std


def train_autoencoder(
    images: Tensor,
    val_images: Tensor,
    cfg: AutoencoderConfig = AutoencoderConfig(),
    steps: int = 1500,
    batch_size: int = 16,
    learning_rate: float = 2e-3,
    weight_decay: float = 0.01,
    seed: int = 0,
    log_every: int = 0,
) -> AutoencoderTrainResult:
    """Stage-1 reconstruction training with pixel MSE.

    `images` is a (N, 3, H, W) stack in [-1, 1] (both sides of every pair
    are fair reconstruction targets). Raises on an empty dataset or a
    non-finite loss; flips are applied for augmentation.
    """
    if images.numel() == 0:
        raise ValueError("empty training set")
    torch.manual_seed(seed)
    model = ImageAutoencoder(cfg)
    opt = torch.optim.AdamW(model.parameters(), lr=learning_rate, weight_decay=weight_decay)
    g = torch.Generator().manual_seed(seed + 1)

    def val_loss() -> float:
        model.eval()
        with torch.no_grad():
            loss = F.mse_loss(model.reconstruct(val_images), val_images)
        model.train()
        return float(loss)

    initial = val_loss()
    history: list[tuple[int, float]] = []
    t0 = time.time()
    for step in range(1, steps + 1):
        idx = torch.randint(0, images.shape[0], (batch_size,), generator=g)
        batch = images[idx]
        if int(torch.randint(0, 2, (), generator=g)):
            batch = torch.flip(batch, dims=(-1,))
        if int(torch.randint(0, 2, (), generator=g)):
            batch = torch.flip(batch, dims=(-2,))
        loss = F.mse_loss(model.reconstruct(batch), batch)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise TrainingDivergedError(f"non-finite reconstruction loss at step {step}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        history.append((step, loss_val))
        if log_every and step % log_every == 0:
            print(f"[train-ae] step {step}/{steps} loss {loss_val:.5f}")

    fit_latent_scale(model, images)
    model.eval()
    return AutoencoderTrainResult(
        model=model,
        initial_val_loss=initial,
        final_val_loss=val_loss(),
        steps=steps,
        seconds=time.time() - t0,
        history=history,
    )
