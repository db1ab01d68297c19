"""Stage-2 diffusion training, conditional sampling, and the checkpoint
bundle tying autoencoder, conditioner, denoiser and schedule together.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .autoencoder import ImageAutoencoder, TrainingDivergedError
from .checkpoint import load_checkpoint, load_module_state, save_checkpoint, state_dict_tensors
from .conditioning import Conditioner
from .config import ModelConfig, config_to_dict, model_config_from_dict
from .data import Triplet, augment, stack_triplets
from .evaluation import EvalReport, evaluate_predictions
from .schedule import (
    NOISE_COEF_VARIANTS,
    NoiseSchedule,
    denoise_step_values,
    make_linear_schedule,
    noisy_from_clean,
)
from .unet import DenoiserUNet

Tensor = torch.Tensor

FREEZE_MODES = ("all-trainable", "paper-faithful")


@dataclass
class TrainConfig:
    """Optimizer and loop policy for diffusion training.

    Defaults are desk scale; the full-scale recipe keeps the same learning
    rate but 10,000 warmup iterations.
    """

    learning_rate: float = 5e-5
    warmup_steps: int = 500
    batch_size: int = 4
    max_steps: int = 2000
    seed: int = 0
    freeze_mode: str = "all-trainable"
    warm_pretrain_steps: int = 500  # paper-faithful: freeze backbone after this
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    val_every: int = 500
    val_batch: int = 16
    log_every: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0 or self.warmup_steps < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, warmup_steps and batch_size must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.freeze_mode not in FREEZE_MODES:
            raise ValueError(f"freeze_mode must be one of {FREEZE_MODES}")


@dataclass
class ModelBundle:
    """Everything needed to run the model end to end."""

    config: ModelConfig
    autoencoder: ImageAutoencoder
    conditioner: Conditioner
    denoiser: DenoiserUNet
    schedule: NoiseSchedule
    manifest: dict = field(default_factory=dict)

    def eval(self) -> "ModelBundle":
        self.autoencoder.eval()
        self.conditioner.eval()
        self.denoiser.eval()
        return self


def build_conditioner(cfg: ModelConfig) -> Conditioner:
    return Conditioner(cfg.conditioning, cfg.resolution)


def build_denoiser(cfg: ModelConfig) -> DenoiserUNet:
    return DenoiserUNet(
        in_channels=cfg.autoencoder.latent_channels,
        layout_dim=cfg.conditioning.layout_channels,
        text_dim=cfg.conditioning.text_channels,
        cfg=cfg.denoiser,
        max_timestep=cfg.schedule.steps,
    )


def build_schedule(cfg: ModelConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.schedule.steps, cfg.schedule.beta_start, cfg.schedule.beta_end)


def warmup_lr(base: float, step: int, warmup_steps: int) -> float:
    """Linear ramp: step k (1-based) at or below warmup runs at k/warmup."""
    return base * min(1.0, step / warmup_steps)


def diffusion_loss(
    batch: Sequence[Triplet] | tuple[Tensor, Tensor, Tensor],
    autoencoder: ImageAutoencoder,
    denoiser: Callable[..., Tensor],
    conditioner: Conditioner,
    schedule: NoiseSchedule,
    generator: torch.Generator,
) -> Tensor:
    """Per-element mean of ||eps - predicted eps||^2 with t uniform on
    [1, T] and fresh unit-Gaussian noise, conditions built from each
    sample's (pre image, change map)."""
    if isinstance(batch, tuple):
        pre, mask, post = batch
    else:
        if len(batch) == 0:
            raise ValueError("empty batch")
        pre, mask, post = stack_triplets(batch)
    with torch.no_grad():
        z0 = autoencoder.encode(post)
    b = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = noisy_from_clean(schedule, z0, t, eps)
    layout_tokens, layout_feature, text = conditioner.conditions(pre, mask)
    eps_pred = denoiser(z_t, t, layout_tokens, layout_feature, text)
    return F.mse_loss(eps_pred, eps)


def _set_requires_grad(params: Sequence[nn.Parameter], flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


def apply_freeze(denoiser: DenoiserUNet, conditioner: Conditioner, freeze_backbone: bool) -> None:
    """Backbone group = denoiser backbone + text tokens; conditioning group
    = gated attention, layout encoder, position embedding, injections."""
    for module in (denoiser, conditioner):
        groups = module.parameter_groups()
        _set_requires_grad(groups["backbone"], not freeze_backbone)
        _set_requires_grad(groups["conditioning"], True)


@dataclass
class DiffusionTrainResult:
    bundle: ModelBundle
    initial_val_loss: float
    final_val_loss: float
    steps: int
    seconds: float
    history: list[tuple[int, float]] = field(repr=False, default_factory=list)
    val_history: list[tuple[int, float]] = field(repr=False, default_factory=list)


def train_diffusion(
    dataset: Sequence[Triplet],
    autoencoder: ImageAutoencoder,
    model_config: ModelConfig,
    train_config: TrainConfig,
    val_dataset: Sequence[Triplet] | None = None,
    checkpoint_dir: str | Path | None = None,
) -> DiffusionTrainResult:
    """Train the denoiser and conditioning path against the frozen
    autoencoder; optionally writes a self-contained checkpoint at the end."""
    if len(dataset) == 0:
        raise ValueError("empty training set")
    source_res = dataset[0].pre.shape[-1]
    if source_res < model_config.resolution:
        raise ValueError(
            f"dataset resolution {source_res} below config resolution {model_config.resolution}"
        )
    crop = model_config.resolution if source_res > model_config.resolution else None
    cfg = train_config
    torch.manual_seed(cfg.seed)
    denoiser = build_denoiser(model_config)
    conditioner = build_conditioner(model_config)
    schedule = build_schedule(model_config)

    autoencoder.eval()
    autoencoder.requires_grad_(False)
    apply_freeze(denoiser, conditioner, freeze_backbone=False)

    params = list(denoiser.parameters()) + list(conditioner.parameters())
    opt = torch.optim.AdamW(
        params, lr=cfg.learning_rate, betas=(0.9, 0.999), weight_decay=cfg.weight_decay
    )
    g_noise = torch.Generator().manual_seed(cfg.seed + 1)
    rng = np.random.default_rng(cfg.seed + 2)

    # Fixed validation batch with a fixed (t, eps) draw for comparable curves.
    val_src = val_dataset if val_dataset is not None and len(val_dataset) else dataset
    val_idx = rng.choice(len(val_src), size=min(cfg.val_batch, len(val_src)), replace=False)
    val_triplets = [val_src[int(i)] for i in val_idx]
    if crop is not None:
        off = (source_res - crop) // 2
        val_triplets = [
            Triplet(
                pre=t.pre[..., off : off + crop, off : off + crop],
                mask=t.mask[..., off : off + crop, off : off + crop],
                post=t.post[..., off : off + crop, off : off + crop],
                id=t.id,
            )
            for t in val_triplets
        ]
    val_pre, val_mask, val_post = stack_triplets(val_triplets)
    g_val = torch.Generator().manual_seed(cfg.seed + 3)
    with torch.no_grad():
        val_z0 = autoencoder.encode(val_post)
    val_t = torch.randint(1, schedule.T + 1, (val_z0.shape[0],), generator=g_val)
    val_eps = torch.randn(val_z0.shape, generator=g_val, dtype=val_z0.dtype)

    def val_loss() -> float:
        denoiser.eval()
        conditioner.eval()
        with torch.no_grad():
            z_t = noisy_from_clean(schedule, val_z0, val_t, val_eps)
            lt, lf, tx = conditioner.conditions(val_pre, val_mask)
            loss = F.mse_loss(denoiser(z_t, val_t, lt, lf, tx), val_eps)
        denoiser.train()
        conditioner.train()
        return float(loss)

    initial_val = val_loss()
    history: list[tuple[int, float]] = []
    val_history: list[tuple[int, float]] = [(0, initial_val)]
    t0 = time.time()
    frozen = False
    for step in range(1, cfg.max_steps + 1):
        if cfg.freeze_mode == "paper-faithful" and not frozen and step > cfg.warm_pretrain_steps:
            apply_freeze(denoiser, conditioner, freeze_backbone=True)
            frozen = True
        lr = warmup_lr(cfg.learning_rate, step, cfg.warmup_steps)
        for group in opt.param_groups:
            group["lr"] = lr
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        batch = [augment(dataset[int(i)], rng, crop=crop) for i in idx]
        loss = diffusion_loss(batch, autoencoder, denoiser, conditioner, schedule, g_noise)
        loss_val = float(loss.detach())
        if not math.isfinite(loss_val):
            raise TrainingDivergedError(
                f"non-finite diffusion loss at step {step} (lr {lr:.2e}, batch {idx.tolist()})"
            )
        opt.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_([p for p in params if p.requires_grad], cfg.grad_clip)
        opt.step()
        history.append((step, loss_val))
        if cfg.val_every and step % cfg.val_every == 0:
            val_history.append((step, val_loss()))
        if cfg.log_every and step % cfg.log_every == 0:
            print(f"[train-diff] step {step}/{cfg.max_steps} loss {loss_val:.4f} lr {lr:.2e}")

    final_val = val_loss()
    val_history.append((cfg.max_steps, final_val))
    bundle = ModelBundle(
        config=model_config,
        autoencoder=autoencoder,
        conditioner=conditioner,
        denoiser=denoiser,
        schedule=schedule,
    ).eval()
    bundle.manifest = bundle_manifest(model_config, seed=cfg.seed, step=cfg.max_steps)
    if checkpoint_dir is not None:
        save_bundle(checkpoint_dir, bundle)
    return DiffusionTrainResult(
        bundle=bundle,
        initial_val_loss=initial_val,
        final_val_loss=final_val,
        steps=cfg.max_steps,
        seconds=time.time() - t0,
        history=history,
        val_history=val_history,
    )


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


def sample_batch(
    pre: Tensor,
    mask: Tensor,
    bundle: ModelBundle,
    seed: int,
    sampler_variant: str = "beta",
    callback: Callable[[int, Tensor], None] | None = None,
) -> Tensor:
    """Draw z_T ~ N(0, I), run the reverse chain down to the clean latent
    with conditions held fixed, and decode. Deterministic given the seed;
    the additive noise is zero on the final (t=1) step."""
    if sampler_variant not in NOISE_COEF_VARIANTS:
        raise ValueError(f"sampler_variant must be one of {NOISE_COEF_VARIANTS}")
    if pre.dim() == 3:
        pre, mask = pre.unsqueeze(0), mask.unsqueeze(0)
        squeeze = True
    else:
        squeeze = False
    ae, cfg, schedule = bundle.autoencoder, bundle.config, bundle.schedule
    h, w = pre.shape[-2:]
    f = cfg.autoencoder.downscale
    s = cfg.conditioning.stride
    if h % f or w % f or h % s or w % s:
        raise ValueError(f"image dims ({h}, {w}) must be divisible by {f} (latent) and {s} (layout)")
    bundle.eval()
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        layout_tokens, layout_feature, text = bundle.conditioner.conditions(pre, mask)
        z = torch.randn(pre.shape[0], cfg.autoencoder.latent_channels, h // f, w // f, generator=g)
        for t in range(schedule.T, 0, -1):
            eps_pred = bundle.denoiser(z, t, layout_tokens, layout_feature, text)
            noise = (
                torch.randn(z.shape, generator=g, dtype=z.dtype)
                if t > 1
                else torch.zeros_like(z)
            )
            z = denoise_step_values(
                z,
                eps_pred,
                noise,
                schedule.alpha(t),
                schedule.alpha_bar(t),
                schedule.beta(t),
                sampler_variant,
            )
            if callback is not None:
                callback(t, z)
        image = ae.decode(z)
    return image.squeeze(0) if squeeze else image


def sample(
    pre: Tensor,
    mask: Tensor,
    bundle: ModelBundle,
    seed: int,
    sampler_variant: str = "beta",
) -> Tensor:
    """Single-sample conditional generation: (3, H, W) in, (3, H, W) out."""
    return sample_batch(pre, mask, bundle, seed, sampler_variant)


def evaluate_model(
    triplets: Sequence[Triplet],
    bundle: ModelBundle,
    seed: int = 0,
    sampler_variant: str = "beta",
    extractor: Callable[[Tensor], Tensor] | None = None,
    cd_model: Callable[[Tensor, Tensor], Tensor] | None = None,
    batch: int = 16,
) -> EvalReport:
    """Generate a prediction for every triplet and score the set."""
    predictions: list[Tensor] = []
    for start in range(0, len(triplets), batch):
        chunk = list(triplets[start : start + batch])
        pre, mask, _ = stack_triplets(chunk)
        out = sample_batch(pre, mask, bundle, seed=seed + start, sampler_variant=sampler_variant)
        predictions.extend(out)
    return evaluate_predictions(
        triplets,
        predictions,
        extractor=extractor,
        cd_model=cd_model,
        checkpoint_id=str(bundle.manifest.get("checkpoint_id", "unknown")),
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Bundle checkpoints
# ---------------------------------------------------------------------------


def autoencoder_manifest(cfg: ModelConfig, seed: int, step: int) -> dict:
    return {
        "kind": "autoencoder",
        "checkpoint_id": f"ae-{seed}-{step}",
        "model_config": config_to_dict(cfg),
        "seed": seed,
        "step": step,
        "resolution": cfg.resolution,
        "f": cfg.autoencoder.downscale,
        "s": cfg.conditioning.stride,
    }


def bundle_manifest(cfg: ModelConfig, seed: int, step: int) -> dict:
    return {
        "kind": "diffusion",
        "checkpoint_id": f"diffusion-{seed}-{step}",
        "model_config": config_to_dict(cfg),
        "schedule": {
            "T": cfg.schedule.steps,
            "beta_start": cfg.schedule.beta_start,
            "beta_end": cfg.schedule.beta_end,
        },
        "seed": seed,
        "step": step,
        "resolution": cfg.resolution,
        "f": cfg.autoencoder.downscale,
        "s": cfg.conditioning.stride,
    }


def save_autoencoder(directory: str | Path, model: ImageAutoencoder, cfg: ModelConfig, seed: int, step: int) -> Path:
    manifest = autoencoder_manifest(cfg, seed, step)
    tensors = {f"ae.{k}": v for k, v in state_dict_tensors(model).items()}
    return save_checkpoint(directory, manifest, tensors)


def load_autoencoder(directory: str | Path) -> tuple[ImageAutoencoder, dict]:
    manifest, tensors = load_checkpoint(directory)
    cfg = model_config_from_dict(manifest["model_config"])
    model = ImageAutoencoder(cfg.autoencoder)
    load_module_state(model, tensors, "ae")
    model.eval()
    return model, manifest


def save_bundle(directory: str | Path, bundle: ModelBundle) -> Path:
    """Self-contained diffusion checkpoint: autoencoder + conditioner +
    denoiser under one manifest."""
    tensors: dict[str, Tensor] = {}
    for prefix, module in (
        ("ae", bundle.autoencoder),
        ("cond", bundle.conditioner),
        ("unet", bundle.denoiser),
    ):
        tensors.update({f"{prefix}.{k}": v for k, v in state_dict_tensors(module).items()})
    manifest = bundle.manifest or bundle_manifest(bundle.config, seed=0, step=0)
    return save_checkpoint(directory, manifest, tensors)


def load_bundle(directory: str | Path) -> ModelBundle:
    manifest, tensors = load_checkpoint(directory)
    if manifest.get("kind") != "diffusion":
        raise ValueError(f"{directory} is not a diffusion checkpoint (kind={manifest.get('kind')})")
    cfg = model_config_from_dict(manifest["model_config"])
    bundle = ModelBundle(
        config=cfg,
        autoencoder=ImageAutoencoder(cfg.autoencoder),
        conditioner=build_conditioner(cfg),
        denoiser=build_denoiser(cfg),
        schedule=build_schedule(cfg),
        manifest=manifest,
    )
    load_module_state(bundle.autoencoder, tensors, "ae")
    load_module_state(bundle.conditioner, tensors, "cond")
    load_module_state(bundle.denoiser, tensors, "unet")
    return bundle.eval()


def make_untrained_bundle(cfg: ModelConfig, seed: int = 0) -> ModelBundle:
    """Freshly initialized bundle (useful for toy checkpoints and tests)."""
    torch.manual_seed(seed)
    bundle = ModelBundle(
        config=cfg,
        autoencoder=ImageAutoencoder(cfg.autoencoder),
        conditioner=build_conditioner(cfg),
        denoiser=build_denoiser(cfg),
        schedule=build_schedule(cfg),
    )
    bundle.manifest = bundle_manifest(cfg, seed=seed, step=0)
    return bundle.eval()
