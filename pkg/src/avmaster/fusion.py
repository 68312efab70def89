"""Question-guided fusion of focus features with the raw feature context."""

from __future__ import annotations

import torch
from torch import nn

from .config import ModelConfig
from .kernels import AttentionBlock, pool_sum, reduce_max_seq


def build_context(audio, visual, word, block: AttentionBlock, order: str = "avw", trace=None):
    """Concatenate the streams along the sequence axis and self-attend.

    Returns the ``(2T + L) x D`` context.
    """
    parts = {"a": audio, "v": visual, "w": word}
    widths = {p.shape[-1] for p in parts.values()}
    if len(widths) != 1:
        raise ValueError(f"stream widths differ: audio {audio.shape[-1]}, visual {visual.shape[-1]}, word {word.shape[-1]}")
    context = block(torch.cat([parts[c] for c in order], dim=-2))
    if trace is not None:
        trace["context"] = context.detach()
    return context


class KeyFusion(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.order = config.context_order
        self.sab_context = AttentionBlock(d, config.n_heads, ffn=config.ffn)
        self.proj_audio = nn.Linear(d, d)
        self.proj_visual = nn.Linear(d, d)
        self.sab_audio = AttentionBlock(d, config.n_heads, ffn=config.ffn)
        self.sab_visual = AttentionBlock(d, config.n_heads, ffn=config.ffn)
        self.out = nn.Linear(d, d)

    def context(self, audio, visual, word, trace=None):
        return build_context(audio, visual, word, self.sab_context, self.order, trace)

    def forward(self, focus_audio, focus_visual, context, trace=None):
        return fuse(focus_audio, focus_visual, context, self, trace)


def fuse(focus_audio, focus_visual, context, fusion: KeyFusion, trace=None):
    """Reduce focus features and context to one ``1 x D`` fused vector.

    The projected ``M x D`` focus feature is sum-pooled to one row before it
    is broadcast-added to every context row.
    """
    if context.shape[-2] < 1:
        raise ValueError("context must have at least one row")
    if focus_audio.shape[-1] != context.shape[-1] or focus_visual.shape[-1] != context.shape[-1]:
        raise ValueError("focus and context widths differ")
    o_audio = pool_sum(fusion.sab_audio(pool_sum(fusion.proj_audio(focus_audio)) + context))
    o_visual = pool_sum(fusion.sab_visual(pool_sum(fusion.proj_visual(focus_visual)) + context))
    stacked = torch.cat([o_audio, o_visual, context], dim=-2)
    fused = reduce_max_seq(fusion.out(stacked))
    if trace is not None:
        trace["o_audio_local"] = o_audio.detach()
        trace["o_visual_local"] = o_visual.detach()
        trace["fused"] = fused.detach()
    return fused
