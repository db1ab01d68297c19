"""Scaled dot-product attention, the gated layout cross-attention, and the
four-sublayer transformer block used at each attention site of the denoiser.

Token tensors are (..., n, d); any leading dimensions broadcast, so heads
are folded into the batch by the module wrappers.
"""

from __future__ import annotations

import math

import torch
from torch import nn

Tensor = torch.Tensor


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v with d_k taken from the key channels."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"key count {k.shape[-2]} != value count {v.shape[-2]}")
    d_k = k.shape[-1]
    logits = q @ k.transpose(-2, -1) / math.sqrt(d_k)
    return torch.softmax(logits, dim=-1) @ v


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    if d % heads:
        raise ValueError(f"channel dim {d} not divisible by {heads} heads")
    return x.reshape(*lead, n, heads, d // heads).transpose(-3, -2)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, n, heads * dh)


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return scaled_dot_attention(q, k, v)
    out = scaled_dot_attention(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads))
    return _merge_heads(out)


class SelfAttention(nn.Module):
    """Projection + attention over one token stream; returns the residual delta."""

    def __init__(self, dim: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(dim, dim, bias=False)
        self.to_v = nn.Linear(dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        return self.to_out(_attend(self.to_q(x), self.to_k(x), self.to_v(x), self.heads))


class CrossAttention(nn.Module):
    """Queries from the stream, keys/values from a context sequence."""

    def __init__(self, dim: int, context_dim: int, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)

    def forward(self, x: Tensor, context: Tensor) -> Tensor:
        return self.to_out(_attend(self.to_q(x), self.to_k(context), self.to_v(context), self.heads))


class GatedCrossAttention(nn.Module):
    """Layout cross-attention scaled by gate_scale * tanh(gate).

    The gate parameter starts at exactly 0, so a freshly built layer passes
    the query stream through untouched and conditioning fades in as the gate
    is learned.
    """

    def __init__(self, dim: int, context_dim: int, gate_scale: float = 1.0, heads: int = 1):
        super().__init__()
        self.heads = heads
        self.gate_scale = gate_scale
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim, bias=False)
        self.gate = nn.Parameter(torch.zeros(()))

    def gate_value(self) -> Tensor:
        return self.gate_scale * torch.tanh(self.gate)

    def forward(self, visual: Tensor, layout: Tensor) -> Tensor:
        """Query-space form: Q + gate_scale * tanh(gate) * Attn(Q, K_l, V_l).

        Returns the conditioned query tokens; with the gate at 0 this is
        exactly the projected visual stream.
        """
        q = self.to_q(visual)
        return q + self.gate_value() * _attend(q, self.to_k(layout), self.to_v(layout), self.heads)

    def stream_delta(self, x: Tensor, layout: Tensor) -> Tensor:
        """Gated residual update used inside a transformer block."""
        attn = _attend(self.to_q(x), self.to_k(layout), self.to_v(layout), self.heads)
        return self.gate_value() * self.to_out(attn)


def gated_cross_attention(visual: Tensor, layout: Tensor, params: GatedCrossAttention) -> Tensor:
    """Functional alias for the query-space gated attention."""
    return params(visual, layout)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int = 4):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(dim, dim * mult), nn.GELU(), nn.Linear(dim * mult, dim))

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class TransformerBlock(nn.Module):
    """Pre-norm stack: self-attention, gated layout cross-attention, text
    cross-attention, feed-forward; every sub-layer is residual, so with the
    gate closed the block ignores the layout stream entirely.

    The self/text/feed-forward sub-layers belong to the freezable backbone
    group; the gated sub-layer (with its norm) is the conditioning group.
    """

    def __init__(
        self,
        dim: int,
        layout_dim: int,
        text_dim: int,
        heads: int = 1,
        gate_scale: float = 1.0,
        ff_mult: int = 4,
    ):
        super().__init__()
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = SelfAttention(dim, heads)
        self.norm_gated = nn.LayerNorm(dim)
        self.gated_attn = GatedCrossAttention(dim, layout_dim, gate_scale, heads)
        self.norm_text = nn.LayerNorm(dim)
        self.text_attn = CrossAttention(dim, text_dim, heads)
        self.norm_ff = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult)

    def forward(self, x: Tensor, layout: Tensor, text: Tensor) -> Tensor:
        x = x + self.self_attn(self.norm_self(x))
        x = x + self.gated_attn.stream_delta(self.norm_gated(x), layout)
        x = x + self.text_attn(self.norm_text(x), text)
        x = x + self.ff(self.norm_ff(x))
        return x

    def forward_without_gated(self, x: Tensor, text: Tensor) -> Tensor:
        """The same block with the gated sub-layer removed (reference path)."""
        x = x + self.self_attn(self.norm_self(x))
        x = x + self.text_attn(self.norm_text(x), text)
        x = x + self.ff(self.norm_ff(x))
        return x

    def conditioning_parameters(self) -> list[nn.Parameter]:
        return list(self.gated_attn.parameters()) + list(self.norm_gated.parameters())


def transformer_block(x: Tensor, layout: Tensor, text: Tensor, params: TransformerBlock) -> Tensor:
    """Functional alias for a block forward pass."""
    return params(x, layout, text)
