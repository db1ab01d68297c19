"""Diffusion-time math: variance tables, forward noising, reverse denoising.

Steps are 1-based throughout: t runs over [1, T], and t=0 tags a clean
latent. Tables are kept in float64 so table identities hold to ~1e-12;
coefficients are cast to the latent dtype when applied.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

Tensor = torch.Tensor

NOISE_COEF_VARIANTS = ("beta", "sqrt_beta")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance tables beta_t, alpha_t = 1 - beta_t, and their
    running product alpha_bar_t for a T-step noising process."""

    T: int
    betas: Tensor = field(repr=False)
    alphas: Tensor = field(repr=False)
    alpha_bars: Tensor = field(repr=False)

    def __post_init__(self) -> None:
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        for name in ("betas", "alphas", "alpha_bars"):
            tab = getattr(self, name)
            if tab.shape != (self.T,) or tab.dtype != torch.float64:
                raise ValueError(f"{name} must be a float64 tensor of shape ({self.T},)")
        b = self.betas
        if not bool(((b > 0) & (b < 1)).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        if self.T > 1 and not bool((b[1:] >= b[:-1]).all()):
            raise ValueError("betas must be non-decreasing in t")
        if not torch.equal(self.alphas, 1.0 - b):
            raise ValueError("alphas must equal 1 - betas exactly")
        if self.T > 1 and not bool((self.alpha_bars[1:] < self.alpha_bars[:-1]).all()):
            raise ValueError("alpha_bars must be strictly decreasing")
        if float(self.alpha_bars[0]) != float(self.alphas[0]):
            raise ValueError("alpha_bar_1 must equal alpha_1")

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"t={t} outside [1, {self.T}]")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention after t noising steps; alpha_bar(0) = 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Build the linearly increasing variance schedule over T steps."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
    return schedule_from_betas(betas)


def schedule_from_betas(betas: Tensor) -> NoiseSchedule:
    betas = betas.to(torch.float64)
    alphas = 1.0 - betas
    alpha_bars = torch.cumprod(alphas, dim=0)
    return NoiseSchedule(T=betas.numel(), betas=betas, alphas=alphas, alpha_bars=alpha_bars)


@dataclass(frozen=True)
class Latent:
    """A latent tensor tagged with its diffusion step (0 means clean)."""

    data: Tensor
    t: int = 0

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ValueError(f"timestep tag must be >= 0, got {self.t}")
        if not bool(torch.isfinite(self.data).all()):
            raise ValueError("latent entries must be finite")


def _check_shapes(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape {tuple(b.shape)} does not match latent {tuple(a.shape)}")


def noisy_from_clean(s: NoiseSchedule, z0: Tensor, t: Tensor | int, eps: Tensor) -> Tensor:
    """Jump directly from clean latents to step t:
    sqrt(alpha_bar_t) * z0 + sqrt(1 - alpha_bar_t) * eps.

    `t` may be a python int or a 1-based long tensor with one entry per
    leading-batch element of `z0`.
    """
    _check_shapes(z0, eps, "noise")
    if isinstance(t, int):
        s._check_t(t)
        ab = s.alpha_bars[t - 1]
    else:
        if t.min() < 1 or t.max() > s.T:
            raise ValueError(f"t entries outside [1, {s.T}]")
        ab = s.alpha_bars[t.long() - 1].reshape(-1, *([1] * (z0.dim() - 1)))
    signal = torch.sqrt(ab).to(z0.dtype)
    noise = torch.sqrt(1.0 - ab).to(z0.dtype)
    return signal * z0 + noise * eps


def forward_sample(s: NoiseSchedule, z0: Latent, t: int, eps: Tensor) -> Latent:
    """Noise a clean latent to step t (the closed-form forward jump)."""
    if z0.t != 0:
        raise ValueError(f"forward_sample expects a clean latent, got tag t={z0.t}")
    return Latent(data=noisy_from_clean(s, z0.data, t, eps), t=t)


def denoise_step_values(
    z_t: Tensor,
    eps_pred: Tensor,
    noise: Tensor,
    alpha_t: float,
    alpha_bar_t: float,
    beta_t: float,
    noise_coef: str = "beta",
) -> Tensor:
    """One reverse update given raw coefficients:

        (z_t - (1 - alpha_t) / sqrt(1 - alpha_bar_t) * eps_pred) / sqrt(alpha_t)
        + sigma_t * noise

    with sigma_t = beta_t ("beta", the as-written default) or sqrt(beta_t)
    ("sqrt_beta", the conventional sampler variance).
    """
    if noise_coef not in NOISE_COEF_VARIANTS:
        raise ValueError(f"noise_coef must be one of {NOISE_COEF_VARIANTS}, got {noise_coef!r}")
    _check_shapes(z_t, eps_pred, "eps_pred")
    _check_shapes(z_t, noise, "noise")
    inv_sqrt_alpha = 1.0 / math.sqrt(alpha_t)
    eps_scale = (1.0 - alpha_t) / math.sqrt(1.0 - alpha_bar_t)
    sigma = beta_t if noise_coef == "beta" else math.sqrt(beta_t)
    dtype = z_t.dtype
    mean = torch.tensor(inv_sqrt_alpha, dtype=dtype) * (
        z_t - torch.tensor(eps_scale, dtype=dtype) * eps_pred
    )
    return mean + torch.tensor(sigma, dtype=dtype) * noise


def reverse_step(
    s: NoiseSchedule,
    z_t: Latent,
    t: int,
    eps_pred: Tensor,
    noise: Tensor,
    noise_coef: str = "beta",
) -> Latent:
    """One denoising step from z_t to z_{t-1}.

    The caller supplies the additive noise; at t=1 it must be zero so the
    final latent is deterministic given z_1.
    """
    s._check_t(t)
    if t == 1 and bool((noise != 0).any()):
        raise ValueError("reverse_step at t=1 requires zero noise")
    data = denoise_step_values(
        z_t.data, eps_pred, noise, s.alpha(t), s.alpha_bar(t), s.beta(t), noise_coef
    )
    return Latent(data=data, t=t - 1)
