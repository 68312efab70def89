"""Attention, feed-forward and pooling building blocks.

All blocks operate on ``(..., S, D)`` tensors so the same code serves single
samples and batches. There are no positional encodings: temporal order only
enters through the focus-scan recurrence.
"""

from __future__ import annotations

import torch
from torch import nn
import torch.nn.functional as F


class ShapeError(ValueError):
    pass


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite values in {what}")


def multihead_attention(query, key_value, to_q, to_k, to_v, to_out, n_heads):
    """Scaled dot-product attention; returns ``(output, weights)``.

    ``weights`` has shape ``(..., H, Sq, Sk)``.
    """
    *lead, sq, dim = query.shape
    sk = key_value.shape[-2]
    dh = dim // n_heads

    def split(t, s):
        return t.reshape(*lead, s, n_heads, dh).transpose(-3, -2)

    q = split(to_q(query), sq)
    k = split(to_k(key_value), sk)
    v = split(to_v(key_value), sk)
    logits = q @ k.transpose(-1, -2) / dh**0.5
    weights = logits.softmax(dim=-1)
    out = (weights @ v).transpose(-3, -2).reshape(*lead, sq, dim)
    return to_out(out), weights


class AttentionBlock(nn.Module):
    """Pre-norm transformer block usable as self- or cross-attention.

    ``forward(x)`` is self-attention; ``forward(x, kv)`` lets ``x`` attend to
    ``kv``. The residual always rides on ``x``. The same layer norm
    normalizes query and key/value inputs.
    """

    def __init__(self, dim: int, n_heads: int, ffn: bool = True, ffn_mult: int = 4):
        super().__init__()
        if dim % n_heads:
            raise ShapeError(f"dim={dim} not divisible by n_heads={n_heads}")
        self.dim = dim
        self.n_heads = n_heads
        self.norm_attn = nn.LayerNorm(dim)
        self.to_q = nn.Linear(dim, dim)
        self.to_k = nn.Linear(dim, dim)
        self.to_v = nn.Linear(dim, dim)
        self.to_out = nn.Linear(dim, dim)
        if ffn:
            self.norm_ffn = nn.LayerNorm(dim)
            self.ffn = nn.Sequential(nn.Linear(dim, dim * ffn_mult), nn.GELU(), nn.Linear(dim * ffn_mult, dim))
        else:
            self.norm_ffn = None
            self.ffn = None

    def forward(self, x, kv=None, return_attn: bool = False):
        h = self.norm_attn(x)
        src = h if kv is None else self.norm_attn(kv)
        out, weights = multihead_attention(h, src, self.to_q, self.to_k, self.to_v, self.to_out, self.n_heads)
        x = x + out
        if self.ffn is not None:
            x = x + self.ffn(self.norm_ffn(x))
        if return_attn:
            return x, weights
        return x


class MLP(nn.Module):
    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or 4 * dim
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


def sab(x, block: AttentionBlock, return_attn: bool = False):
    """Self-attention block on an ``S x D`` (or batched) input."""
    if x.shape[-1] != block.dim:
        raise ShapeError(f"input width {x.shape[-1]} != block dim {block.dim}")
    if x.shape[-2] < 1:
        raise ShapeError("self-attention needs at least one row")
    _check_finite(x, "self-attention input")
    return block(x, return_attn=return_attn)


def cab(query, kv, block: AttentionBlock, return_attn: bool = False):
    """Cross-attention block: ``query`` attends to ``kv``."""
    if query.shape[-1] != block.dim or kv.shape[-1] != block.dim:
        raise ShapeError(f"widths {query.shape[-1]}/{kv.shape[-1]} != block dim {block.dim}")
    if query.shape[-2] < 1 or kv.shape[-2] < 1:
        raise ShapeError("cross-attention needs at least one query and one key/value row")
    if query.shape[:-2] != kv.shape[:-2]:
        raise ShapeError(f"batch shapes differ: {tuple(query.shape[:-2])} vs {tuple(kv.shape[:-2])}")
    _check_finite(query, "cross-attention query")
    _check_finite(kv, "cross-attention key/value")
    return block(query, kv, return_attn=return_attn)


def mlp(x, module: MLP):
    if x.shape[-1] != module.fc1.in_features:
        raise ShapeError(f"input width {x.shape[-1]} != MLP width {module.fc1.in_features}")
    return module(x)


def pool_sum(x):
    """Sum over the sequence axis, keeping it as a length-1 axis."""
    if x.shape[-2] < 1:
        raise ShapeError("cannot pool an empty sequence")
    return x.sum(dim=-2, keepdim=True)


def reduce_max_seq(x):
    """Columnwise maximum over the sequence axis.

    The gradient goes to the first row attaining the maximum.
    """
    if x.shape[-2] < 1:
        raise ShapeError("cannot reduce an empty sequence")
    idx = x.argmax(dim=-2, keepdim=True)
    return x.gather(-2, idx)
