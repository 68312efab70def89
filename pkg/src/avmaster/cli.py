"""``avmaster`` command line: gen, train, eval, ablate, probe, gradcheck, inspect.

Structured results go to stdout as JSON, logs to stderr. Exit status is 0 on
success, 1 on a domain error (bad file, invalid config, failed check) and 2
on a usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import torch

from .config import ConfigError, InferenceConfig, ModelConfig
from .data import HEADER, ArchiveFormatError, TaskSpec, generate, load_archive, read_manifest, write_archive
from .gradcheck import gradient_check
from .harness import (
    SUITES,
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    ablate,
    evaluate,
    load_checkpoint,
    probe_focus_trajectory,
    task_split,
    train,
)

log = logging.getLogger("avmaster")

DOMAIN_ERRORS = (ConfigError, ArchiveFormatError, CheckpointError, NonFiniteLossError, FileNotFoundError, ValueError, KeyError, OSError)


def emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    sys.stdout.flush()


def _read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def load_run_config(path=None) -> tuple:
    """Read a run config into ``(ModelConfig, TrainConfig, InferenceConfig)``.

    The file is either a bare model config or an object with optional
    ``model``, ``train`` and ``inference`` sections. ``AVM_SEED`` overrides
    both seeds.
    """
    data = _read_json(path) if path else {}
    if not any(k in data for k in ("model", "train", "inference")):
        data = {"model": data}
    unknown = sorted(set(data) - {"model", "train", "inference"})
    if unknown:
        raise ConfigError(f"unknown config section(s) {unknown}")
    model = ModelConfig.from_dict(data.get("model", {}))
    try:
        tc = TrainConfig(**data.get("train", {}))
        ic = InferenceConfig(**data.get("inference", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    env_seed = os.environ.get("AVM_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"AVM_SEED must be an integer, got {env_seed!r}") from exc
        model = model.replace(seed=seed)
        tc = dataclasses.replace(tc, seed=seed)
    return model, tc, ic


def _fit_to_data(config: ModelConfig, samples) -> ModelConfig:
    """Fill unset native widths from the data."""
    first = samples[0]
    changes = {}
    for key, width in (("audio_dim", first.audio.data.shape[1]), ("visual_dim", first.visual.data.shape[1]), ("text_dim", first.question.word.shape[1])):
        if getattr(config, key) is None and width != config.dim:
            changes[key] = width
    return config.replace(**changes) if changes else config


def _load_spec(path) -> TaskSpec:
    return TaskSpec.from_dict(_read_json(path)) if path else TaskSpec()


def _data(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: no such archive")
    return load_archive(p)


def _inference(args, base: InferenceConfig) -> InferenceConfig:
    disabled = set(args.disable or ())
    return InferenceConfig(
        enable_qa=base.enable_qa and "qa" not in disabled,
        enable_ap=base.enable_ap and "ap" not in disabled,
        enable_vp=base.enable_vp and "vp" not in disabled,
        combine_mode=args.combine or base.combine_mode,
    )


def _train_overrides(args, tc: TrainConfig) -> TrainConfig:
    changes = {k: getattr(args, k) for k in ("epochs", "batch_size", "lr", "lr_decay", "lr_interval") if getattr(args, k, None) is not None}
    return dataclasses.replace(tc, **changes)


# --- verbs -------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = _load_spec(args.spec)
    if os.environ.get("AVM_SEED") is not None:
        spec = dataclasses.replace(spec, seed=int(os.environ["AVM_SEED"]))
    archive = write_archive(generate(spec, args.n, args.start), args.out)
    emit({"archive": str(archive.path), "count": len(archive), "spec": spec.to_dict()})
    return 0


def cmd_train(args) -> int:
    model_config, tc, ic = load_run_config(args.config)
    tc = _train_overrides(args, tc)
    if args.data:
        samples = _data(args.data)
        source = {"archive": str(args.data)}
    else:
        spec = _load_spec(args.spec)
        samples = generate(spec, args.n)
        source = {"spec": spec.to_dict(), "n": args.n}
    model_config = _fit_to_data(model_config, samples)
    eval_samples = _data(args.eval_data) if args.eval_data else None
    out = Path(args.out)
    if (out / "metrics.jsonl").exists():
        (out / "metrics.jsonl").unlink()
    result = train(model_config, samples, tc, eval_samples, ic, out_dir=out)
    result.manifest["source"] = source
    (out / "manifest.json").write_text(json.dumps(result.manifest, indent=2, sort_keys=True) + "\n")
    final = result.manifest["epochs"][-1] if result.manifest["epochs"] else {}
    emit({"run": str(out), "epochs": result.epoch, "final": final, "timing": result.manifest.get("timing", {})})
    return 0


def _load_run(run) -> "object":
    run = Path(run)
    ckpt = run / "checkpoint" if (run / "checkpoint").exists() else run
    return load_checkpoint(ckpt)


def cmd_eval(args) -> int:
    result = _load_run(args.run)
    base = InferenceConfig(**result.manifest.get("inference", {})) if result.manifest.get("inference") else InferenceConfig()
    metrics = evaluate(result.model, _data(args.data), _inference(args, base))
    emit(metrics)
    return 0


def cmd_ablate(args) -> int:
    model_config, tc, ic = load_run_config(args.config)
    tc = _train_overrides(args, tc)
    spec = _load_spec(args.spec)
    train_s, test_s = task_split(spec, args.n_train, args.n_test)
    model_config = _fit_to_data(model_config, train_s)
    if model_config.max_segments < spec.T or model_config.max_words < spec.L:
        model_config = model_config.replace(max_segments=max(model_config.max_segments, spec.T), max_words=max(model_config.max_words, spec.L))
    names = list(args.variant) if args.variant else list(SUITES[args.suite])
    rows = ablate(model_config, train_s, test_s, names, tc, tuple(args.seeds), ic)
    emit({"suite": args.suite, "seeds": list(args.seeds), "rows": rows})
    return 0


def cmd_probe(args) -> int:
    result = _load_run(args.run)
    curve = probe_focus_trajectory(result.model, _data(args.data), causal=not args.non_causal)
    emit({"causal": not args.non_causal, "curve": curve})
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig.tiny()
    if args.config:
        config, _, _ = load_run_config(args.config)
    report = gradient_check(config, n_samples=args.n, seed=args.seed, entries_per_tensor=args.entries, tol=args.tol)
    emit(report.as_dict())
    if not report.passed:
        log.error("gradient check failed")
        return 1
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"{path}: no such file or directory")
    if path.is_file():
        raw = path.read_bytes()[: HEADER.size]
        if len(raw) < HEADER.size:
            raise ArchiveFormatError(f"{path.name}: truncated header")
        magic, version, code, reserved, rows, cols = HEADER.unpack(raw)
        emit({"kind": "tensor", "magic": magic.decode("latin-1"), "version": version, "dtype_code": code,
              "reserved": reserved, "rows": rows, "cols": cols})
    elif (path / "manifest.json").exists() and (path / "checkpoint").exists():
        manifest = _read_json(path / "manifest.json")
        epochs = manifest.get("epochs", [])
        emit({"kind": "run", "config": manifest.get("config"), "n_epochs": len(epochs), "final": epochs[-1] if epochs else None})
    elif (path / "state.json").exists():
        state = _read_json(path / "state.json")
        emit({"kind": "checkpoint", "version": state["version"], "epoch": state["epoch"], "config": state["config"],
              "n_tensors": len(state["shapes"])})
    else:
        manifest = read_manifest(path)
        qtypes = {}
        for rec in manifest["samples"]:
            qtypes[rec["qtype"]] = qtypes.get(rec["qtype"], 0) + 1
        emit({"kind": "archive", "count": manifest["count"], "qtypes": qtypes,
              "segments": sorted({r["T"] for r in manifest["samples"]})})
    return 0


# --- parser ------------------------------------------------------------------


def _train_flags(p) -> None:
    p.add_argument("--epochs", type=int, help="number of training epochs")
    p.add_argument("--batch-size", type=int, help="mini-batch size")
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--lr-decay", type=float, help="learning-rate decay factor")
    p.add_argument("--lr-interval", type=int, help="epochs between decays")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avmaster", description="Audio-visual question answering experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="verb", required=True, metavar="VERB")

    p = sub.add_parser("gen", help="write a synthetic AVM-FEAT archive")
    p.add_argument("--spec", help="TaskSpec JSON (defaults built in)")
    p.add_argument("--out", required=True, help="archive directory")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--start", type=int, default=0, help="index of the first sample")
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="train a model into a run directory")
    p.add_argument("--config", help="run config JSON")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--data", help="training archive")
    src.add_argument("--spec", help="TaskSpec JSON; data generated in memory when --data is absent")
    p.add_argument("--n", type=int, default=2000, help="synthetic sample count with --spec")
    p.add_argument("--eval-data", help="archive evaluated after every epoch")
    p.add_argument("--out", required=True, help="run directory")
    _train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run on an archive")
    p.add_argument("--run", required=True, help="run or checkpoint directory")
    p.add_argument("--data", required=True, help="archive to evaluate")
    p.add_argument("--disable", action="append", choices=("qa", "ap", "vp"), help="drop a decoder from the combination (repeatable)")
    p.add_argument("--combine", choices=("add", "mul", "wadd"), help="combination rule")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare a suite of variants")
    p.add_argument("--suite", required=True, choices=sorted(SUITES), help="variant suite")
    p.add_argument("--variant", action="append", help="run only these variants (repeatable)")
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--spec", help="TaskSpec JSON")
    p.add_argument("--n-train", type=int, default=2000, help="training samples")
    p.add_argument("--n-test", type=int, default=500, help="test samples")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="seeds per variant")
    _train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("probe", help="per-step accuracy of the focus scan")
    p.add_argument("--run", required=True, help="run or checkpoint directory")
    p.add_argument("--data", required=True, help="archive to probe")
    p.add_argument("--non-causal", action="store_true", help="keep full sequences outside the focus scan")
    p.set_defaults(fn=cmd_probe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--config", help="model config JSON (tiny config by default)")
    p.add_argument("--n", type=int, default=2, help="batch size")
    p.add_argument("--seed", type=int, default=0, help="parameter and batch seed")
    p.add_argument("--entries", type=int, default=3, help="entries differenced per tensor")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error per group")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect", help="describe an archive, run, checkpoint or tensor file")
    p.add_argument("path", help="path to inspect")
    p.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    try:
        return args.fn(args)
    except DOMAIN_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"avmaster {args.verb}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
