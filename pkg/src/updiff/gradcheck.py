"""Central finite-difference checking of autograd gradients.

Used by the test suite to validate the attention and denoiser backward
passes against an independent numerical oracle. Run models in float64:
with step 1e-3 the truncation error is ~1e-6, far below float32 noise.
"""

from __future__ import annotations

from typing import Callable

import torch
from torch import nn

Tensor = torch.Tensor


def relative_error(analytic: float, numeric: float, floor: float = 1e-3) -> float:
    """|a - n| / max(floor, |a|, |n|); the floor makes near-zero gradients
    compare on an absolute scale instead of blowing up the ratio."""
    return abs(analytic - numeric) / max(floor, abs(analytic), abs(numeric))


def max_param_gradient_error(
    model: nn.Module,
    loss_fn: Callable[[], Tensor],
    step: float = 1e-3,
    sample_fraction: float = 1.0,
    max_entries_per_param: int = 64,
    seed: int = 0,
    floor: float = 1e-3,
) -> float:
    """Compare autograd parameter gradients of loss_fn() against central
    finite differences and return the worst relative error.

    `sample_fraction` bounds how many entries of each parameter are probed
    (at least one, at most max_entries_per_param), chosen by a seeded RNG so
    runs are repeatable.
    """
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise ValueError("model has no trainable parameters")

    model.zero_grad(set_to_none=True)
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    rng = torch.Generator().manual_seed(seed)
    worst = 0.0
    with torch.no_grad():
        for p, grad in zip(params, analytic):
            flat = p.reshape(-1)
            n = flat.numel()
            k = max(1, min(max_entries_per_param, int(round(n * sample_fraction))))
            idx = torch.randperm(n, generator=rng)[:k] if k < n else torch.arange(n)
            for i in idx.tolist():
                orig = flat[i].item()
                flat[i] = orig + step
                up = float(loss_fn())
                flat[i] = orig - step
                down = float(loss_fn())
                flat[i] = orig
                numeric = (up - down) / (2.0 * step)
                err = relative_error(grad.reshape(-1)[i].item(), numeric, floor)
                worst = max(worst, err)
    model.zero_grad(set_to_none=True)
    return worst
