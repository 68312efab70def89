"""Per-modality preference features guided by the question words."""

from __future__ import annotations

from torch import nn

from .config import ModelConfig
from .kernels import MLP, AttentionBlock


class PreferenceBranch(nn.Module):
    """``MLP(SAB(x) + CAB(query=x, kv=words))`` for one modality."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.sab = AttentionBlock(d, config.n_heads, ffn=config.ffn)
        self.cab = AttentionBlock(d, config.n_heads, ffn=config.ffn)
        self.mlp = MLP(d)

    def forward(self, feats, word, trace=None):
        return activate(feats, word, self, trace)


def activate(feats, word, branch: PreferenceBranch, trace=None):
    if feats.shape[-1] != word.shape[-1]:
        raise ValueError(f"feature width {feats.shape[-1]} != word width {word.shape[-1]}")
    cross, weights = branch.cab(feats, word, return_attn=True)
    o_global = branch.sab(feats) + cross
    if trace is not None:
        trace["o_global"] = o_global.detach()
        # (..., H, T, L): per-segment attention over question tokens
        trace["word_attn"] = weights.detach()
    return branch.mlp(o_global)
