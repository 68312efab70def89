"""Template-based focus sampling over a segment sequence.

Each modality owns a learnable ``M x D`` template that is updated once per
segment. One update is::

    tp1 = repeat(f_k) + template
    tp2 = SAB2(SAB1(tp1) + bias_inner) + bias_outer
    template = CAB(query=tp2, key/value=repeat(f_k))

and the template after the last segment is the focus feature.
"""

from __future__ import annotations

import torch
from torch import nn

from .config import ConfigError, ModelConfig
from .kernels import AttentionBlock


def focus_step(feat_k, template_prev, bias_inner, bias_outer, sab1, sab2, cab_block, trace=None):
    """One update of the template given the segment feature ``feat_k``.

    ``feat_k`` is ``(..., 1, D)`` (or ``(D,)``), ``template_prev`` is
    ``(..., M, D)``. Returns the updated ``(..., M, D)`` template.
    """
    if feat_k.dim() == 1:
        feat_k = feat_k[None, :]
    lead = torch.broadcast_shapes(feat_k.shape[:-2], template_prev.shape[:-2])
    m, d = template_prev.shape[-2:]
    if feat_k.shape[-1] != d:
        raise ValueError(f"segment width {feat_k.shape[-1]} != template width {d}")
    template_prev = template_prev.expand(*lead, m, d)
    repeated = feat_k.expand(*lead, m, d)
    tp1 = repeated + template_prev
    tp2 = sab2(sab1(tp1) + bias_inner) + bias_outer
    # identical key/value rows: attention reduces to the projected value
    out, weights = cab_block(tp2, repeated, return_attn=True)
    if trace is not None:
        trace.setdefault("tp1", []).append(tp1.detach())
        trace.setdefault("tp2", []).append(tp2.detach())
        trace.setdefault("cab_attn", []).append(weights.detach())
    return out


class FocusBranch(nn.Module):
    """Template, bias bank and attention blocks for one modality."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, m = config.dim, config.n_templates
        self.attn_shared = config.attn_shared
        self.bias_shared = config.bias_shared
        self.tie_bias_slots = config.tie_bias_slots
        self.max_segments = config.max_segments
        n_attn = 1 if config.attn_shared else config.max_segments
        n_bias = 1 if config.bias_shared else config.max_segments

        def blocks():
            return nn.ModuleList(AttentionBlock(d, config.n_heads, ffn=config.ffn) for _ in range(n_attn))

        self.sab1 = blocks()
        self.sab2 = blocks()
        self.cab = blocks()
        self.template = nn.Parameter(torch.zeros(m, d))
        self.bias_inner = nn.Parameter(torch.zeros(n_bias, m, d))
        if config.tie_bias_slots:
            self.bias_outer = None
        else:
            self.bias_outer = nn.Parameter(torch.zeros(n_bias, m, d))

    def step_params(self, k: int):
        """The (sab1, sab2, cab, bias_inner, bias_outer) used at step ``k``."""
        if k >= self.max_segments and not (self.attn_shared and self.bias_shared):
            raise ConfigError(
                f"step {k} exceeds max_segments={self.max_segments} with unshared per-step parameters"
            )
        a = 0 if self.attn_shared else k
        b = 0 if self.bias_shared else k
        inner = self.bias_inner[b]
        outer = inner if self.bias_outer is None else self.bias_outer[b]
        return self.sab1[a], self.sab2[a], self.cab[a], inner, outer

    def step(self, feats, k: int, template_prev, trace=None):
        """Apply the step-``k`` update using segment ``k`` of ``feats``."""
        if not 0 <= k < feats.shape[-2]:
            raise IndexError(f"step {k} outside [0, {feats.shape[-2]})")
        sab1, sab2, cab_block, inner, outer = self.step_params(k)
        return focus_step(feats[..., k : k + 1, :], template_prev, inner, outer, sab1, sab2, cab_block, trace)

    def initial(self, lead_shape=()):
        return self.template.expand(*lead_shape, *self.template.shape)

    def forward(self, feats, trace=None):
        return focus_scan(feats, self, trace=trace)


def focus_scan(feats, branch: FocusBranch, initial_template=None, trace=None):
    """Left fold of the focus step over all segments of ``feats``."""
    t = feats.shape[-2]
    if t < 1:
        raise ValueError("cannot scan an empty sequence")
    if t > branch.max_segments and not (branch.attn_shared and branch.bias_shared):
        raise ConfigError(f"T={t} exceeds max_segments={branch.max_segments} with unshared per-step parameters")
    template = branch.initial(feats.shape[:-2]) if initial_template is None else initial_template
    for k in range(t):
        template = branch.step(feats, k, template, trace)
        if trace is not None:
            trace.setdefault("templates", []).append(template.detach())
    return template


class FocusCapture(nn.Module):
    """Independent focus branches for the audio and visual streams."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.audio = FocusBranch(config)
        self.visual = FocusBranch(config)

    def forward(self, audio, visual, trace=None):
        ta = tv = None
        if trace is not None:
            ta = trace.setdefault("focus_audio", {})
            tv = trace.setdefault("focus_visual", {})
        return focus_scan(audio, self.audio, trace=ta), focus_scan(visual, self.visual, trace=tv)

    def initial(self, lead_shape=()):
        return self.audio.initial(lead_shape), self.visual.initial(lead_shape)
