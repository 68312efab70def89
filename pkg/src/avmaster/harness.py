"""Training loop, evaluation, ablation runner, focus-trajectory probe and checkpoints."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .config import ConfigError, InferenceConfig, ModelConfig, Sample, check_sample
from .data import ArchiveFormatError, TaskSpec, dataset_hash, generate, read_tensor, write_tensor
from .model import AVMaster, compute_losses, init_parameters, torch_dtype
from .objectives import combine

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    """Optimizer and schedule settings; defaults follow the full-scale recipe."""

    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.1
    lr_interval: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_interval < 1:
            raise ConfigError("epochs >= 0, batch_size >= 1 and lr_interval >= 1 are required")
        if not (self.lr > 0 and 0 < self.lr_decay <= 1):
            raise ConfigError("lr must be positive and lr_decay in (0, 1]")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** (epoch // self.lr_interval)


def make_optimizer(model: AVMaster, train_config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=train_config.lr)


def batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_epoch(model, optimizer, samples: Sequence[Sample], train_config: TrainConfig, epoch: int) -> dict:
    """One pass over ``samples``; returns averaged loss parts and running accuracy."""
    config = model.config
    for group in optimizer.param_groups:
        group["lr"] = train_config.lr_at(epoch)
    model.train()
    sums = defaultdict(float)
    per_qtype = defaultdict(list)
    correct = seen = 0
    for b, idx in enumerate(batches(len(samples), train_config.batch_size, train_config.seed, epoch)):
        batch = [samples[i] for i in idx]
        answers = np.array([s.answer for s in batch])
        out = model.forward_samples(batch)
        total, parts = compute_losses(out, answers, config)
        for name, value in parts.as_dict().items():
            if not math.isfinite(value):
                raise NonFiniteLossError(f"epoch {epoch} batch {b}: loss part {name} is {value}")
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        optimizer.step()
        for name, value in parts.as_dict().items():
            sums[name] += value * len(batch)
        hits = out.logits_qa.argmax(-1).numpy() == answers
        for sample, hit in zip(batch, hits):
            per_qtype[sample.qtype].append(bool(hit))
        correct += int(hits.sum())
        seen += len(batch)
    record = {"epoch": epoch, "lr": train_config.lr_at(epoch)}
    record.update({name: sums[name] / seen for name in ("l_qa", "l_vp", "l_ap", "l_c", "total")})
    record["train_acc_qa_running"] = correct / seen
    record["train_acc_qa_per_qtype"] = {k: float(np.mean(v)) for k, v in sorted(per_qtype.items())}
    return record


@dataclass
class TrainResult:
    model: AVMaster
    optimizer: torch.optim.Optimizer
    manifest: dict
    epoch: int


def new_manifest(model_config, train_config, samples, variant=None, inference_config=None) -> dict:
    return {
        "config": model_config.to_dict(),
        "train": dataclasses.asdict(train_config),
        "inference": dataclasses.asdict(inference_config or InferenceConfig()),
        "seed": train_config.seed,
        "data": {"n": len(samples), "hash": dataset_hash(samples)},
        "variant": variant,
        "epochs": [],
        "timing": {},
    }


def train(
    model_config: ModelConfig,
    samples: Sequence[Sample],
    train_config: TrainConfig = TrainConfig(),
    eval_samples: Optional[Sequence[Sample]] = None,
    inference_config: Optional[InferenceConfig] = None,
    resume: Optional[TrainResult] = None,
    until_epoch: Optional[int] = None,
    out_dir=None,
    variant: Optional[str] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> TrainResult:
    """Train from scratch (or continue ``resume``) up to ``until_epoch``.

    Parameters are seeded by ``model_config.seed``; batch order by
    ``train_config.seed`` and the epoch index, so resuming at epoch ``e``
    replays exactly what an uninterrupted run would do.
    """
    if not samples:
        raise ValueError("no training samples")
    for s in samples:
        check_sample(s, model_config)
    until_epoch = train_config.epochs if until_epoch is None else until_epoch
    if resume is None:
        model = init_parameters(model_config)
        optimizer = make_optimizer(model, train_config)
        manifest = new_manifest(model_config, train_config, samples, variant, inference_config)
        start = 0
    else:
        model, optimizer, manifest, start = resume.model, resume.optimizer, resume.manifest, resume.epoch
    metrics_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
    t_start = time.perf_counter()
    for epoch in range(start, until_epoch):
        t0 = time.perf_counter()
        record = train_epoch(model, optimizer, samples, train_config, epoch)
        if eval_samples:
            metrics = evaluate(model, eval_samples, inference_config)
            record["eval_accuracy"] = metrics["accuracy"]
            record["eval_per_group"] = metrics["per_group"]
            record["eval_per_qtype"] = metrics["per_qtype"]
        manifest["epochs"].append(record)
        manifest["timing"][f"epoch_{epoch}"] = round(time.perf_counter() - t0, 3)
        log.info("epoch %d lr %.2e loss %.4f (qa %.4f) acc %.3f", epoch, record["lr"], record["total"], record["l_qa"], record["train_acc_qa_running"])
        if metrics_path is not None:
            with metrics_path.open("a") as f:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        if on_epoch is not None:
            on_epoch(record)
    manifest["timing"]["train_seconds"] = round(time.perf_counter() - t_start, 3)
    result = TrainResult(model, optimizer, manifest, max(start, until_epoch))
    if out_dir is not None:
        save_checkpoint(result, out_dir / "checkpoint")
        write_manifest(manifest, out_dir / "manifest.json")
    return result


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# --- evaluation ------------------------------------------------------------


@torch.no_grad()
def predict_distributions(model: AVMaster, samples: Sequence[Sample], batch_size: int = 256) -> dict:
    """Softmax distributions of every decoder, as ``(N, C)`` float64 arrays."""
    model.eval()
    out = defaultdict(list)
    for start in range(0, len(samples), batch_size):
        res = model.forward_samples(samples[start : start + batch_size])
        for key, logits in (("qa", res.logits_qa), ("ap", res.logits_ap), ("vp", res.logits_vp)):
            if logits is not None:
                out[key].append(logits.double().softmax(-1).numpy())
    return {k: np.concatenate(v) for k, v in out.items()}


def _group_of(qtype: str) -> str:
    return qtype.split("/")[0]


def evaluate(model: AVMaster, samples: Sequence[Sample], inference_config: Optional[InferenceConfig] = None,
             batch_size: int = 256, return_predictions: bool = False) -> dict:
    """Overall, per-question-type and per-decoder accuracy."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    ic = inference_config or InferenceConfig()
    if not model.config.use_preference_path and (ic.enable_ap or ic.enable_vp):
        ic = dataclasses.replace(ic, enable_ap=False, enable_vp=False, enable_qa=True)
    dists = predict_distributions(model, samples, batch_size)
    y = np.array([s.answer for s in samples])
    answers, _ = combine(dists.get("qa"), dists.get("ap"), dists.get("vp"), ic)
    hit = answers == y
    per_qtype, per_group = defaultdict(list), defaultdict(list)
    for s, h in zip(samples, hit):
        per_qtype[s.qtype].append(h)
        per_group[_group_of(s.qtype)].append(h)
    metrics = {
        "n": len(samples),
        "accuracy": float(hit.mean()),
        "per_qtype": {k: float(np.mean(v)) for k, v in sorted(per_qtype.items())},
        "per_group": {k: float(np.mean(v)) for k, v in sorted(per_group.items())},
        "per_decoder": {k: float((d.argmax(-1) == y).mean()) for k, d in sorted(dists.items())},
        "inference": dataclasses.asdict(ic),
    }
    if return_predictions:
        metrics["predictions"] = answers.tolist()
    return metrics


def probe_focus_trajectory(model: AVMaster, samples: Sequence[Sample], inference_config=None,
                           causal: bool = True, batch_size: int = 256) -> list:
    """Accuracy obtained from the template state after each scan step.

    With ``causal=True`` step ``k`` sees the first ``k + 1`` segments of
    every stream, i.e. what the scan has consumed so far. With
    ``causal=False`` only the focus features are replaced by the step-``k``
    templates while the rest of the pipeline sees the full sequences.
    """
    if not samples:
        raise ValueError("cannot probe an empty dataset")
    lengths = {s.T for s in samples}
    if len(lengths) != 1:
        raise ValueError(f"probe needs equal segment counts, got {sorted(lengths)}")
    if not (model.config.use_temporal_path and model.config.use_focus):
        raise ConfigError("probe needs a model with the focus scan enabled")
    T = lengths.pop()
    curve = []
    if causal:
        for k in range(T):
            truncated = [s.truncated(k + 1) for s in samples]
            acc = evaluate(model, truncated, inference_config, batch_size)["accuracy"]
            curve.append({"step": k, "accuracy": acc})
        return curve
    per_step = _accuracy_with_step_templates(model, samples, inference_config, T, batch_size)
    return [{"step": k, "accuracy": a} for k, a in enumerate(per_step)]


@torch.no_grad()
def _accuracy_with_step_templates(model, samples, inference_config, T, batch_size):
    from .model import stack_samples

    ic = inference_config or InferenceConfig()
    model.eval()
    dtype = next(model.parameters()).dtype
    y = np.array([s.answer for s in samples])
    hits = np.zeros((T, len(samples)), dtype=bool)
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        a, v, w, s = stack_samples(chunk, dtype)
        out = model(a, v, w, s, trace=True)
        ta = out.trace["focus_audio"]["templates"]
        tv = out.trace["focus_visual"]["templates"]
        for k in range(T):
            res = model(a, v, w, s, focus_override=(ta[k], tv[k]))
            probs = [None if l is None else l.double().softmax(-1).numpy() for l in (res.logits_qa, res.logits_ap, res.logits_vp)]
            answers, _ = combine(*probs, ic)
            hits[k, start : start + len(chunk)] = answers == y[start : start + len(chunk)]
    return hits.mean(axis=1).tolist()


# --- checkpoints -------------------------------------------------------------


def _safe(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(result: TrainResult, path) -> None:
    """Parameters and Adam moments as AVM-FEAT tensors plus ``state.json``."""
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    (path / "optim").mkdir(parents=True, exist_ok=True)
    names = [n for n, _ in result.model.named_parameters()]
    shapes = {}
    for name, p in result.model.named_parameters():
        arr = p.detach().cpu().numpy()
        shapes[name] = list(arr.shape)
        write_tensor(path / "params" / f"{_safe(name)}.avmf", arr.reshape(arr.shape[0] if arr.ndim > 1 else 1, -1))
    opt_state = result.optimizer.state_dict()
    steps = {}
    for idx, st in opt_state["state"].items():
        name = names[idx]
        steps[name] = float(st["step"])
        for key in ("exp_avg", "exp_avg_sq"):
            arr = st[key].detach().cpu().numpy()
            write_tensor(path / "optim" / f"{_safe(name)}.{key}.avmf", arr.reshape(arr.shape[0] if arr.ndim > 1 else 1, -1))
    groups = [{k: v for k, v in g.items() if k != "params"} for g in opt_state["param_groups"]]
    state = {
        "version": CHECKPOINT_VERSION,
        "config": result.model.config.to_dict(),
        "epoch": result.epoch,
        "shapes": shapes,
        "optimizer": {"steps": steps, "param_groups": groups},
        "manifest": result.manifest,
    }
    (path / "state.json").write_text(json.dumps(state, indent=2, sort_keys=True) + "\n")


def _read_param(path: Path, name: str, shape) -> np.ndarray:
    rows = shape[0] if len(shape) > 1 else 1
    cols = int(np.prod(shape)) // rows if rows else 0
    try:
        arr = read_tensor(path, (rows, cols))
    except ArchiveFormatError as exc:
        raise CheckpointError(f"tensor {name}: {exc}") from exc
    return arr.reshape(shape)


def load_checkpoint(path, model_config: Optional[ModelConfig] = None, train_config: Optional[TrainConfig] = None) -> TrainResult:
    """Restore model, optimizer and manifest.

    With ``model_config`` given, the stored tensors must fit that config;
    nothing is copied unless every tensor matches.
    """
    path = Path(path)
    state_path = path / "state.json"
    if not state_path.exists():
        raise FileNotFoundError(f"{state_path}: no checkpoint state")
    state = json.loads(state_path.read_text())
    if state.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{state_path}: unsupported checkpoint version {state.get('version')!r}")
    config = model_config or ModelConfig.from_dict(state["config"])
    manifest = state.get("manifest") or {}
    tc = train_config or TrainConfig(**manifest.get("train", {}))
    model = AVMaster(config).to(torch_dtype(config))
    expected = {n: list(p.shape) for n, p in model.named_parameters()}
    stored = {n: list(s) for n, s in state["shapes"].items()}
    for name in expected:
        if name not in stored:
            raise CheckpointError(f"tensor {name}: missing from checkpoint")
        if stored[name] != expected[name]:
            raise CheckpointError(f"tensor {name}: checkpoint shape {stored[name]} != model shape {expected[name]}")
    extra = sorted(set(stored) - set(expected))
    if extra:
        raise CheckpointError(f"tensor {extra[0]}: not part of this model")
    values = {n: _read_param(path / "params" / f"{_safe(n)}.avmf", n, expected[n]) for n in expected}
    optimizer = make_optimizer(model, tc)
    names = [n for n, _ in model.named_parameters()]
    moments = {}
    for idx, name in enumerate(names):
        if name in state["optimizer"]["steps"]:
            moments[idx] = {
                key: _read_param(path / "optim" / f"{_safe(name)}.{key}.avmf", f"{name}.{key}", expected[name])
                for key in ("exp_avg", "exp_avg_sq")
            }
    dtype = torch_dtype(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(torch.from_numpy(values[name]).to(dtype))
    opt_state = optimizer.state_dict()
    for idx, mom in moments.items():
        opt_state["state"][idx] = {
            "step": torch.tensor(state["optimizer"]["steps"][names[idx]], dtype=torch.float32),
            "exp_avg": torch.from_numpy(mom["exp_avg"]).to(dtype),
            "exp_avg_sq": torch.from_numpy(mom["exp_avg_sq"]).to(dtype),
        }
    for group, saved in zip(opt_state["param_groups"], state["optimizer"]["param_groups"]):
        group.update({k: tuple(v) if isinstance(v, list) else v for k, v in saved.items()})
    optimizer.load_state_dict(opt_state)
    return TrainResult(model, optimizer, manifest, state["epoch"])


# --- ablations -------------------------------------------------------------


@dataclass
class Variant:
    name: str
    model_changes: dict = field(default_factory=dict)
    inference_changes: dict = field(default_factory=dict)
    segments: Optional[int] = None


def _variants() -> dict:
    no_pref = {"use_preference_path": False, "lambda_vp": 0.0, "lambda_ap": 0.0, "lambda_c": 0.0}
    no_ap_vp = {"enable_ap": False, "enable_vp": False}
    vs = [
        Variant("full"),
        Variant("w/o TDPP", {"use_temporal_path": False}),
        Variant("w/o GPAP", no_pref),
        Variant("w/o DPCL", {"lambda_c": 0.0}),
        Variant("w/o AVFC", {"use_focus": False}),
        Variant("all removed", {"use_temporal_path": False, **no_pref}),
        Variant("shared attn + shared bias", {"attn_shared": True, "bias_shared": True}),
        Variant("shared attn + unshared bias", {"attn_shared": True, "bias_shared": False}),
        Variant("unshared attn + shared bias", {"attn_shared": False, "bias_shared": True}),
        Variant("unshared attn + unshared bias", {"attn_shared": False, "bias_shared": False}),
        Variant("w/o APE", inference_changes={"enable_ap": False}),
        Variant("w/o VPE", inference_changes={"enable_vp": False}),
        Variant("w/o AVPE", inference_changes={"enable_ap": False, "enable_vp": False}),
        Variant("ADD", inference_changes={"combine_mode": "add"}),
        Variant("MUL", inference_changes={"combine_mode": "mul"}),
        Variant("W-ADD", inference_changes={"combine_mode": "wadd"}),
        # a decoder whose loss is switched off is never trained, so it does not vote
        Variant("L_qa", {"lambda_vp": 0.0, "lambda_ap": 0.0, "lambda_c": 0.0}, no_ap_vp),
        Variant("L_qa + L_c", {"lambda_vp": 0.0, "lambda_ap": 0.0}, no_ap_vp),
        Variant("L_qa + L_c + L_a^p", {"lambda_vp": 0.0}, {"enable_vp": False}),
        Variant("L_qa + L_c + L_v^p", {"lambda_ap": 0.0}, {"enable_ap": False}),
        Variant("L_qa + L_c + L_a^p + L_v^p"),
    ]
    for t in (2, 4, 8, 12, 16):
        vs.append(Variant(f"T={t}", segments=t))
    return {v.name: v for v in vs}


VARIANTS = _variants()

SUITES = {
    "table6": ["w/o TDPP", "w/o GPAP", "w/o DPCL", "w/o AVFC", "all removed", "full"],
    "table7": [
        "shared attn + shared bias",
        "shared attn + unshared bias",
        "unshared attn + shared bias",
        "unshared attn + unshared bias",
    ],
    "table8": ["w/o APE", "w/o VPE", "w/o AVPE", "full"],
    "table9": ["W-ADD", "MUL", "ADD"],
    "table10": ["L_qa", "L_qa + L_c", "L_qa + L_c + L_a^p", "L_qa + L_c + L_v^p", "L_qa + L_c + L_a^p + L_v^p"],
    "sweepT": ["T=2", "T=4", "T=8", "T=12", "T=16"],
}


def resolve_variants(names) -> list:
    unknown = [n for n in names if n not in VARIANTS]
    if unknown:
        raise KeyError(f"unknown variant(s) {unknown}; valid names: {sorted(VARIANTS)}")
    if not names:
        raise ValueError("variant list is empty")
    return [VARIANTS[n] for n in names]


def ablate(
    model_config: ModelConfig,
    train_samples: Sequence[Sample],
    test_samples: Sequence[Sample],
    variants: Sequence,
    train_config: TrainConfig = TrainConfig(),
    seeds: Sequence[int] = (0, 1, 2),
    inference_config: Optional[InferenceConfig] = None,
) -> list:
    """Train and evaluate each variant under every seed; one row per variant.

    Variants that differ only at inference time reuse the trained model.
    """
    variants = resolve_variants([v if isinstance(v, str) else v.name for v in variants])
    base_ic = inference_config or InferenceConfig()
    trained = {}
    rows = []
    for variant in variants:
        cfg = model_config.replace(**variant.model_changes)
        ic = dataclasses.replace(base_ic, **variant.inference_changes)
        tr, te = train_samples, test_samples
        if variant.segments is not None:
            if variant.segments > cfg.max_segments:
                raise ConfigError(f"{variant.name}: more segments than max_segments={cfg.max_segments}")
            tr = [s.truncated(variant.segments) for s in train_samples]
            te = [s.truncated(variant.segments) for s in test_samples]
        accs, decoders = [], []
        for seed in seeds:
            key = (json.dumps(cfg.replace(seed=seed).to_dict(), sort_keys=True), variant.segments, seed)
            if key not in trained:
                log.info("training variant %s seed %d", variant.name, seed)
                tc = dataclasses.replace(train_config, seed=seed)
                trained[key] = train(cfg.replace(seed=seed), tr, tc, variant=variant.name).model
            metrics = evaluate(trained[key], te, ic)
            accs.append(metrics["accuracy"])
            decoders.append(metrics["per_decoder"])
        rows.append({
            "variant": variant.name,
            "accuracy": accs,
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs)),
            "per_decoder": decoders,
            "changes": {"model": variant.model_changes, "inference": variant.inference_changes, "segments": variant.segments},
        })
    return rows


def task_split(spec: TaskSpec, n_train: int, n_test: int):
    return generate(spec, n_train), generate(spec, n_test, start=n_train)
