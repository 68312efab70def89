"""The dual-path model: parameter layout, initialization and forward pass."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .config import LossBreakdown, ModelConfig, Sample
from .focus import FocusCapture
from .fusion import KeyFusion
from .objectives import (
    MultimodalDecoder,
    PreferenceDecoder,
    loss_contrastive,
    loss_nll,
)
from .preference import PreferenceBranch

TEMPLATE_STD = 0.02

PARAMETER_GROUPS = {
    "proj_": "input",
    "focus.": "focus",
    "fusion.": "fusion",
    "pref_": "preference",
    "dec_qa.": "decoder_multimodal",
    "dec_audio.": "decoder_audio",
    "dec_visual.": "decoder_visual",
}


def torch_dtype(config: ModelConfig):
    return torch.float64 if config.dtype == "float64" else torch.float32


@dataclass
class ForwardOutput:
    logits_qa: torch.Tensor
    logits_ap: Optional[torch.Tensor]
    logits_vp: Optional[torch.Tensor]
    fused: torch.Tensor
    pref_audio: Optional[torch.Tensor]
    pref_visual: Optional[torch.Tensor]
    trace: Optional[dict] = None


@dataclass
class BatchOutput:
    """Per-sample outputs of a (possibly ragged) batch, in input order.

    Preference features are kept as their sequence means, which is all the
    contrastive loss needs and is shape-stable across samples.
    """

    logits_qa: torch.Tensor
    logits_ap: Optional[torch.Tensor]
    logits_vp: Optional[torch.Tensor]
    fused: torch.Tensor
    pref_audio_mean: Optional[torch.Tensor]
    pref_visual_mean: Optional[torch.Tensor]
    traces: list = field(default_factory=list)


class AVMaster(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d, w = config.dim, config.widths
        self.proj_audio = nn.Linear(w["audio"], d)
        self.proj_visual = nn.Linear(w["visual"], d)
        self.proj_word = nn.Linear(w["text"], d)
        self.proj_sentence = nn.Linear(w["text"], d)
        self.focus = FocusCapture(config)
        self.fusion = KeyFusion(config)
        self.pref_audio = PreferenceBranch(config)
        self.pref_visual = PreferenceBranch(config)
        self.dec_qa = MultimodalDecoder(config)
        self.dec_audio = PreferenceDecoder(config)
        self.dec_visual = PreferenceDecoder(config)

    def forward(self, audio, visual, word, sentence, trace: bool = False, focus_override=None) -> ForwardOutput:
        """Batched forward: ``(N, T, Da)``, ``(N, T, Dv)``, ``(N, L, Dt)``, ``(N, 1, Dt)``.

        ``focus_override`` replaces the scanned (audio, visual) focus features.
        """
        cfg = self.config
        rec = {} if trace else None
        if sentence.dim() == audio.dim() - 1:
            sentence = sentence.unsqueeze(-2)
        a = self.proj_audio(audio)
        v = self.proj_visual(visual)
        w = self.proj_word(word)
        s = self.proj_sentence(sentence)

        lead = a.shape[:-2]
        context = self.fusion.context(a, v, w, trace=rec)
        if cfg.use_temporal_path:
            if focus_override is not None:
                focus_a, focus_v = focus_override
            elif cfg.use_focus:
                focus_a, focus_v = self.focus(a, v, trace=rec)
            else:
                focus_a, focus_v = self.focus.initial(lead)
            fused = self.fusion(focus_a, focus_v, context, trace=rec)
        else:
            fused = context.mean(dim=-2, keepdim=True)
            if rec is not None:
                rec["fused"] = fused.detach()
        logits_qa = self.dec_qa(fused, s)

        logits_ap = logits_vp = pref_a = pref_v = None
        if cfg.use_preference_path:
            ta = tv = None
            if rec is not None:
                ta, tv = rec.setdefault("pref_audio", {}), rec.setdefault("pref_visual", {})
            pref_a = self.pref_audio(a, w, trace=ta)
            pref_v = self.pref_visual(v, w, trace=tv)
            logits_ap = self.dec_audio(pref_a, s)
            logits_vp = self.dec_visual(pref_v, s)
        return ForwardOutput(logits_qa, logits_ap, logits_vp, fused.squeeze(-2), pref_a, pref_v, rec)

    def forward_samples(self, samples: Sequence[Sample], trace: bool = False) -> BatchOutput:
        """Forward a list of samples, grouping equal-shape samples together."""
        dtype = next(self.parameters()).dtype
        groups = defaultdict(list)
        for i, s in enumerate(samples):
            groups[(s.T, s.L)].append(i)
        n = len(samples)
        order = []
        outs = []
        traces = []
        for key in sorted(groups):
            idx = groups[key]
            tensors = stack_samples([samples[i] for i in idx], dtype)
            out = self(*tensors, trace=trace)
            order.extend(idx)
            outs.append(out)
            if trace:
                traces.append((idx, out.trace))
        inverse = torch.empty(n, dtype=torch.long)
        inverse[torch.tensor(order)] = torch.arange(n)

        def gather(name, reduce=None):
            parts = [getattr(o, name) for o in outs]
            if parts[0] is None:
                return None
            if reduce is not None:
                parts = [reduce(p) for p in parts]
            return torch.cat(parts, dim=0)[inverse]

        mean = lambda t: t.mean(dim=-2)  # noqa: E731
        return BatchOutput(
            gather("logits_qa"),
            gather("logits_ap"),
            gather("logits_vp"),
            gather("fused"),
            gather("pref_audio", mean),
            gather("pref_visual", mean),
            traces,
        )


def stack_samples(samples: Sequence[Sample], dtype=torch.float32):
    """Stack equal-shape samples into ``(audio, visual, word, sentence)`` tensors."""

    def stack(get):
        return torch.from_numpy(np.stack([get(s) for s in samples])).to(dtype)

    return (
        stack(lambda s: s.audio.data),
        stack(lambda s: s.visual.data),
        stack(lambda s: s.question.word),
        stack(lambda s: s.question.sentence),
    )


def parameter_group(name: str) -> str:
    for prefix, group in PARAMETER_GROUPS.items():
        if name.startswith(prefix):
            return group
    raise KeyError(f"parameter {name!r} belongs to no group")


def parameter_groups(model: nn.Module) -> dict:
    groups = defaultdict(list)
    for name, _ in model.named_parameters():
        groups[parameter_group(name)].append(name)
    return dict(groups)


def inert_parameters(model: AVMaster) -> list:
    """Parameters that receive exactly zero gradient by construction.

    The focus cross-attention attends to one segment feature repeated over
    all rows, so its softmax is uniform whatever the queries and keys are;
    the query and key projections therefore never influence the output.
    """
    names = []
    for name, _ in model.named_parameters():
        if name.startswith("focus.") and ".cab." in name and (".to_q." in name or ".to_k." in name):
            names.append(name)
    return names


def _init_(model: nn.Module, generator: torch.Generator) -> None:
    with torch.no_grad():
        for name, module in model.named_modules():
            if isinstance(module, nn.Linear):
                std = 1.0 / math.sqrt(module.in_features)
                module.weight.copy_(torch.randn(module.weight.shape, generator=generator, dtype=torch.float64) * std)
                module.bias.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        for name, param in model.named_parameters():
            if name.endswith(("template", "bias_inner", "bias_outer")):
                param.copy_(torch.randn(param.shape, generator=generator, dtype=torch.float64) * TEMPLATE_STD)


def init_parameters(config: ModelConfig, seed: Optional[int] = None) -> AVMaster:
    """Build a model with every tensor drawn from a generator seeded by ``seed``.

    Draws happen in float64 and are cast afterwards, so equal ``(config,
    seed)`` yields bitwise-equal tensors.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    model = AVMaster(config)
    generator = torch.Generator().manual_seed(int(seed))
    model.to(torch.float64)
    _init_(model, generator)
    model.to(torch_dtype(config))
    for p in model.parameters():
        p.grad = None
    return model


def compute_losses(out: BatchOutput, answers, config: ModelConfig):
    """Return ``(total_tensor, LossBreakdown)`` for a batch output."""
    y = torch.as_tensor(np.asarray(answers), dtype=torch.long)
    zero = out.logits_qa.new_zeros(())
    l_qa = loss_nll(out.logits_qa.softmax(-1), y)
    l_ap = l_vp = l_c = zero
    if out.logits_ap is not None:
        l_ap = loss_nll(out.logits_ap.softmax(-1), y)
        l_vp = loss_nll(out.logits_vp.softmax(-1), y)
        l_c = loss_contrastive(out.fused, out.pref_audio_mean, out.pref_visual_mean, config.tau, config.contrastive_mode)
    total = config.lambda_qa * l_qa + config.lambda_vp * l_vp + config.lambda_ap * l_ap + config.lambda_c * l_c
    parts = [float(t.detach()) for t in (l_qa, l_vp, l_ap, l_c)]
    return total, LossBreakdown.from_parts(parts, config.lambdas)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
