"""Answer decoders, training losses and the inference-time combiner."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .config import InferenceConfig, LossBreakdown, ModelConfig
from .kernels import AttentionBlock

NLL_CLAMP = 1e-12


@dataclass
class DecoderOutput:
    logits: torch.Tensor

    @property
    def probs(self) -> torch.Tensor:
        return self.logits.softmax(dim=-1)


class MultimodalDecoder(nn.Module):
    """Two transformer blocks over ``[fused; sentence]``, mean-pool, norm, linear."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.blocks = nn.ModuleList(AttentionBlock(d, config.n_heads, ffn=config.ffn) for _ in range(2))
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.n_answers)

    def forward(self, fused, sentence):
        x = torch.cat([fused, sentence], dim=-2)
        for block in self.blocks:
            x = block(x)
        return self.head(self.norm(x.mean(dim=-2)))


class PreferenceDecoder(nn.Module):
    """One transformer block over ``[sentence; preference]``, mean-pool, norm, linear."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d = config.dim
        self.block = AttentionBlock(d, config.n_heads, ffn=config.ffn)
        self.norm = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.n_answers)

    def forward(self, pref, sentence):
        x = self.block(torch.cat([sentence, pref], dim=-2))
        return self.head(self.norm(x.mean(dim=-2)))


def decode_multimodal(fused, sentence, decoder: MultimodalDecoder) -> DecoderOutput:
    return DecoderOutput(decoder(fused, sentence))


def decode_preference(pref, sentence, decoder: PreferenceDecoder) -> DecoderOutput:
    return DecoderOutput(decoder(pref, sentence))


def loss_nll(probs, y):
    """Mean of ``-log p[y]`` over the batch; probabilities are clamped at 1e-12."""
    probs = torch.as_tensor(probs)
    y = torch.as_tensor(y, dtype=torch.long)
    if probs.dim() == 1:
        probs, y = probs[None], y.reshape(1)
    if (y < 0).any() or (y >= probs.shape[-1]).any():
        raise IndexError(f"answer index outside [0, {probs.shape[-1]})")
    picked = probs.gather(-1, y[:, None]).squeeze(-1)
    return -picked.clamp_min(NLL_CLAMP).log().mean()


def _cosine(a, b):
    """Pairwise cosine similarity ``(N, D) x (K, D) -> (N, K)``; zero vectors give 0."""
    na = a.norm(dim=-1, keepdim=True)
    nb = b.norm(dim=-1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        warnings.warn("zero-norm vector in cosine similarity; treating cosine as 0", RuntimeWarning, stacklevel=3)
    a_hat = a / torch.where(na == 0, torch.ones_like(na), na)
    b_hat = b / torch.where(nb == 0, torch.ones_like(nb), nb)
    return a_hat @ b_hat.transpose(-1, -2)


def loss_contrastive(fused, pref_audio, pref_visual, tau: float, mode: str = "cross"):
    """Contrast each sample's fused vector against preference features.

    ``pref_*`` are ``(N, T, D)`` sequences or their ``(N, D)`` sequence means.
    In ``"cross"`` mode the negatives for sample ``i`` are the fused vector of
    ``i`` scored against the preference means of every other sample ``k``.
    ``"literal"`` mode uses the other samples' own positive scores instead.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if fused.dim() == 3:
        fused = fused.squeeze(-2)
    g_audio = pref_audio.mean(dim=-2) if pref_audio.dim() == 3 else pref_audio
    g_visual = pref_visual.mean(dim=-2) if pref_visual.dim() == 3 else pref_visual
    n = fused.shape[0]
    if n < 1:
        raise ValueError("contrastive loss needs at least one sample")
    cos_v = _cosine(fused, g_visual) / tau
    cos_a = _cosine(fused, g_audio) / tau
    idx = torch.arange(n)
    pos_v, pos_a = cos_v[idx, idx], cos_a[idx, idx]
    log_pos = torch.logsumexp(torch.stack([pos_v, pos_a], dim=-1), dim=-1)
    if mode == "cross":
        # columns interleaved so row i with n == 1 reduces to log_pos exactly
        log_den = torch.logsumexp(torch.stack([cos_v, cos_a], dim=-1).reshape(n, 2 * n), dim=-1)
    elif mode == "literal":
        log_den = torch.logsumexp(log_pos, dim=0).expand(n)
    else:
        raise ValueError(f"unknown contrastive mode {mode!r}")
    return -(log_pos - log_den).mean()


def loss_total(parts, lambdas) -> LossBreakdown:
    return LossBreakdown.from_parts(parts, lambdas)


def combine(probs_qa, probs_ap, probs_vp, ic: InferenceConfig):
    """Combine decoder distributions; returns ``(answers, combined)``.

    Inputs are ``(N, C)`` or ``(C,)`` probability arrays; disabled decoders
    may be passed as ``None``. ``combined`` rows sum to one.
    """
    chosen = []
    for enabled, p, name in ((ic.enable_qa, probs_qa, "qa"), (ic.enable_ap, probs_ap, "ap"), (ic.enable_vp, probs_vp, "vp")):
        if enabled:
            if p is None:
                raise ValueError(f"decoder {name!r} is enabled but produced no distribution")
            chosen.append(np.asarray(p, dtype=np.float64))
    single = chosen[0].ndim == 1
    chosen = [np.atleast_2d(p) for p in chosen]
    if ic.combine_mode == "add":
        combined = np.sum(chosen, axis=0)
    elif ic.combine_mode == "wadd":
        peaks = np.stack([p.max(axis=-1) for p in chosen])
        weights = peaks / peaks.sum(axis=0)
        combined = np.sum([w[:, None] * p for w, p in zip(weights, chosen)], axis=0)
    else:
        with np.errstate(divide="ignore"):
            log_sum = np.sum([np.log(p) for p in chosen], axis=0)
        finite_max = np.max(np.where(np.isfinite(log_sum), log_sum, -np.inf), axis=-1, keepdims=True)
        finite_max = np.where(np.isfinite(finite_max), finite_max, 0.0)
        combined = np.exp(log_sum - finite_max)
    totals = combined.sum(axis=-1, keepdims=True)
    combined = np.divide(combined, totals, out=np.full_like(combined, 1.0 / combined.shape[-1]), where=totals > 0)
    answers = combined.argmax(axis=-1)
    if single:
        return int(answers[0]), combined[0]
    return answers, combined


def infer(outputs, ic: InferenceConfig):
    """Argmax answer from three :class:`DecoderOutput` (qa, ap, vp)."""
    probs = [None if o is None else o.probs.detach().cpu().numpy() for o in outputs]
    return combine(*probs, ic)
