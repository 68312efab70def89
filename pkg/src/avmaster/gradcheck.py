"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .config import ModelConfig, Sample
from .model import compute_losses, inert_parameters, init_parameters, parameter_group


def numeric_gradient(fn: Callable[[], torch.Tensor], tensor: torch.Tensor, indices, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. selected flat entries of ``tensor``."""
    flat = tensor.data.view(-1)
    out = np.empty(len(indices))
    with torch.no_grad():
        for j, i in enumerate(indices):
            orig = flat[i].item()
            flat[i] = orig + step
            f_plus = fn().item()
            flat[i] = orig - step
            f_minus = fn().item()
            flat[i] = orig
            out[j] = (f_plus - f_minus) / (2 * step)
    return out


def relative_error(analytic, numeric) -> float:
    """``||a - n|| / max(||a||, ||n||)``; zero when both vanish."""
    a, n = np.asarray(analytic, dtype=float), np.asarray(numeric, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(n))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - n) / scale)


def random_batch(config: ModelConfig, n: int, seed: int = 0) -> list:
    rng = np.random.default_rng(seed)
    w = config.widths
    T, L = config.max_segments, config.max_words
    return [
        Sample.from_arrays(
            rng.standard_normal((T, w["audio"])),
            rng.standard_normal((T, w["visual"])),
            rng.standard_normal((L, w["text"])),
            rng.standard_normal((1, w["text"])),
            int(rng.integers(config.n_answers)),
            id=f"g{i}",
        )
        for i in range(n)
    ]


@dataclass
class GradcheckReport:
    groups: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    dead: list = field(default_factory=list)
    inert: list = field(default_factory=list)
    inert_max_abs: float = 0.0
    tol: float = 1e-4
    inert_tol: float = 1e-8
    n_entries: int = 0

    @property
    def passed(self) -> bool:
        return (
            not self.dead
            and self.inert_max_abs <= self.inert_tol
            and all(err <= self.tol for err in self.groups.values())
        )

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "n_entries": self.n_entries,
            "max_relative_error_per_group": self.groups,
            "dead_parameters": self.dead,
            "inert_parameters": self.inert,
            "inert_max_abs_numeric_gradient": self.inert_max_abs,
        }


def gradient_check(
    config: Optional[ModelConfig] = None,
    n_samples: int = 2,
    seed: int = 0,
    entries_per_tensor: int = 3,
    step: float = 1e-5,
    tol: float = 1e-4,
) -> GradcheckReport:
    """Compare autograd against central differences for every parameter tensor.

    The loss is the weighted total over a random batch, evaluated in
    float64. Per tensor, ``entries_per_tensor`` random entries are
    differenced; the group error is the relative error of the stacked
    entries of that group. Any tensor whose analytic gradient is
    identically zero is reported dead unless it is structurally inert;
    inert tensors must instead show (numerically) zero gradient.
    """
    config = (config or ModelConfig.tiny()).replace(dtype="float64")
    model = init_parameters(config, seed)
    samples = random_batch(config, n_samples, seed)
    answers = [s.answer for s in samples]

    def loss():
        return compute_losses(model.forward_samples(samples), answers, config)[0]

    model.zero_grad(set_to_none=True)
    loss().backward()
    rng = np.random.default_rng(seed)
    inert = set(inert_parameters(model))
    report = GradcheckReport(tol=tol, inert=sorted(inert))
    stacked = defaultdict(lambda: ([], []))
    for name, p in model.named_parameters():
        grad = p.grad if p.grad is not None else torch.zeros_like(p)
        if name not in inert and not grad.any():
            report.dead.append(name)
        k = min(entries_per_tensor, p.numel())
        idx = rng.choice(p.numel(), size=k, replace=False)
        analytic = grad.view(-1)[torch.as_tensor(idx)].numpy()
        numeric = numeric_gradient(loss, p, idx, step)
        report.n_entries += k
        if name in inert:
            if grad.any():
                report.dead.append(f"{name} (expected inert, got nonzero gradient)")
            report.inert_max_abs = max(report.inert_max_abs, float(np.abs(numeric).max()))
            continue
        report.tensors[name] = relative_error(analytic, numeric)
        a_list, n_list = stacked[parameter_group(name)]
        a_list.extend(analytic)
        n_list.extend(numeric)
    report.groups = {g: relative_error(a, n) for g, (a, n) in sorted(stacked.items())}
    return report
