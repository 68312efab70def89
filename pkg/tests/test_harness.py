import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from avmaster import InferenceConfig, ModelConfig, TaskSpec, TrainConfig, evaluate, generate, probe_focus_trajectory, train
from avmaster.config import ConfigError
from avmaster.gradcheck import random_batch
from avmaster.harness import (
    SUITES,
    VARIANTS,
    CheckpointError,
    NonFiniteLossError,
    ablate,
    batches,
    load_checkpoint,
    resolve_variants,
    save_checkpoint,
)

SPEC = TaskSpec(T=4, D=8, L=3, C=5, K=5, seed=2)
CFG = ModelConfig.tiny()
FAST = TrainConfig(epochs=2, batch_size=8, lr=1e-3)


@pytest.fixture(scope="module")
def data():
    return generate(SPEC, 24), generate(SPEC, 16, start=24)


def params(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def same_params(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


def strip_timing(manifest):
    return {k: v for k, v in manifest.items() if k != "timing"}


def test_defaults_follow_the_reference_recipe():
    tc = TrainConfig()
    assert (tc.lr, tc.lr_decay, tc.lr_interval, tc.batch_size, tc.epochs) == (1e-4, 0.1, 8, 32, 30)


def test_learning_rate_schedule():
    tc = TrainConfig()
    for e in range(30):
        assert tc.lr_at(e) == 1e-4 * 0.1 ** (e // 8)
    assert tc.lr_at(7) == 1e-4 and tc.lr_at(8) == pytest.approx(1e-5) and tc.lr_at(29) == pytest.approx(1e-7)


def test_optimizer_uses_scheduled_rate(data):
    tc = TrainConfig(epochs=3, batch_size=8, lr=1e-3, lr_decay=0.5, lr_interval=1)
    result = train(CFG, data[0], tc)
    assert [r["lr"] for r in result.manifest["epochs"]] == [1e-3, 5e-4, 2.5e-4]
    assert result.optimizer.param_groups[0]["lr"] == 2.5e-4
    assert isinstance(result.optimizer, torch.optim.Adam)


def test_batches_cover_every_sample_once():
    seen = np.concatenate(list(batches(10, 4, seed=0, epoch=3)))
    assert sorted(seen.tolist()) == list(range(10))
    assert [len(b) for b in batches(10, 4, 0, 0)] == [4, 4, 2]


def test_masked_losses_contribute_nothing(data):
    cfg = CFG.replace(lambda_vp=0.0, lambda_ap=0.0, lambda_c=0.0)
    for rec in train(cfg, data[0], FAST).manifest["epochs"]:
        assert rec["total"] == rec["l_qa"]
        assert rec["l_c"] > 0


def test_training_is_deterministic(data):
    a = train(CFG, data[0], FAST, eval_samples=data[1])
    b = train(CFG, data[0], FAST, eval_samples=data[1])
    assert same_params(a.model.state_dict(), b.model.state_dict())
    assert strip_timing(a.manifest) == strip_timing(b.manifest)


def test_manifest_records_reproducibility_fields(data, tmp_path):
    result = train(CFG, data[0], FAST, eval_samples=data[1], out_dir=tmp_path, variant="full")
    m = result.manifest
    assert m["config"] == CFG.to_dict() and m["seed"] == FAST.seed and m["variant"] == "full"
    assert m["data"]["n"] == 24 and len(m["data"]["hash"]) == 64
    assert len(m["epochs"]) == 2
    rec = m["epochs"][0]
    for key in ("l_qa", "l_vp", "l_ap", "l_c", "total", "eval_accuracy", "eval_per_qtype", "train_acc_qa_per_qtype"):
        assert key in rec
    lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(l)["epoch"] for l in lines] == [0, 1]
    assert json.loads((tmp_path / "manifest.json").read_text())["epochs"] == m["epochs"]
    assert (tmp_path / "checkpoint" / "state.json").exists()


def test_overfit_loss_decreases(data):
    result = train(CFG, data[0][:16], TrainConfig(epochs=30, batch_size=16, lr=3e-3))
    l_qa = [r["l_qa"] for r in result.manifest["epochs"]]
    assert np.median(l_qa[-3:]) < np.median(l_qa[:3])


def test_non_finite_loss_aborts_with_diagnostic(data):
    result = train(CFG, data[0], TrainConfig(epochs=0))
    with torch.no_grad():
        result.model.dec_qa.head.bias.fill_(math.nan)
    with pytest.raises(NonFiniteLossError, match="epoch 0 batch 0: loss part l_qa"):
        train(CFG, data[0], FAST, resume=result)


def test_random_parameters_score_at_chance():
    samples = random_batch(CFG, 1200, seed=9)
    model = train(CFG, samples[:1], TrainConfig(epochs=0)).model
    acc = evaluate(model, samples)["accuracy"]
    sigma = math.sqrt(0.2 * 0.8 / len(samples))
    assert abs(acc - 0.2) <= 3 * sigma


def test_disabling_decoders_only_changes_combination(data):
    model = train(CFG, data[0], FAST).model
    full = evaluate(model, data[1])
    for ic in (InferenceConfig(enable_ap=False, enable_vp=False), InferenceConfig(enable_qa=False),
               InferenceConfig(enable_vp=False, combine_mode="mul")):
        other = evaluate(model, data[1], ic)
        assert other["per_decoder"] == full["per_decoder"]
    only_qa = evaluate(model, data[1], InferenceConfig(enable_ap=False, enable_vp=False))
    assert only_qa["accuracy"] == only_qa["per_decoder"]["qa"]


def test_evaluate_groups_and_errors(data):
    model = train(CFG, data[0], TrainConfig(epochs=0)).model
    m = evaluate(model, data[1], return_predictions=True)
    assert set(m["per_group"]) <= {"A-QA", "V-QA"}
    assert len(m["predictions"]) == 16
    assert m["accuracy"] == np.mean(np.array(m["predictions"]) == [s.answer for s in data[1]])
    with pytest.raises(ValueError):
        evaluate(model, [])


def test_checkpoint_roundtrip_is_bitwise(data, tmp_path):
    result = train(CFG, data[0], FAST)
    save_checkpoint(result, tmp_path / "ck")
    restored = load_checkpoint(tmp_path / "ck")
    assert same_params(result.model.state_dict(), restored.model.state_dict())
    assert restored.epoch == 2 and restored.manifest == result.manifest
    a, b = result.optimizer.state_dict(), restored.optimizer.state_dict()
    for idx in a["state"]:
        for key in ("exp_avg", "exp_avg_sq", "step"):
            assert torch.equal(a["state"][idx][key], b["state"][idx][key])


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_resume_matches_uninterrupted_training(data, tmp_path, dtype):
    cfg = CFG.replace(dtype=dtype)
    tc = dataclasses.replace(FAST, epochs=3)
    first = train(cfg, data[0], tc, until_epoch=2)
    save_checkpoint(first, tmp_path / "ck")
    restored = load_checkpoint(tmp_path / "ck")
    continued = train(cfg, data[0], tc, resume=first)
    resumed = train(cfg, data[0], tc, resume=restored)
    assert continued.manifest["epochs"][-1]["total"] - resumed.manifest["epochs"][-1]["total"] == 0
    assert same_params(continued.model.state_dict(), resumed.model.state_dict())


def test_mismatched_checkpoint_is_rejected(data, tmp_path):
    save_checkpoint(train(CFG, data[0], TrainConfig(epochs=0)), tmp_path / "ck")
    with pytest.raises(CheckpointError, match=r"tensor proj_audio\.weight"):
        load_checkpoint(tmp_path / "ck", model_config=CFG.replace(dim=12, n_heads=2))
    with pytest.raises(CheckpointError, match="not part of this model|missing"):
        load_checkpoint(tmp_path / "ck", model_config=CFG.replace(tie_bias_slots=True))
    state = json.loads((tmp_path / "ck" / "state.json").read_text())
    state["version"] = 99
    (tmp_path / "ck" / "state.json").write_text(json.dumps(state))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "ck")


def test_probe_final_step_equals_evaluation(data):
    model = train(CFG, data[0], FAST).model
    expected = evaluate(model, data[1])["accuracy"]
    for causal in (True, False):
        curve = probe_focus_trajectory(model, data[1], causal=causal)
        assert [p["step"] for p in curve] == list(range(SPEC.T))
        assert curve[-1]["accuracy"] == expected


def test_probe_requires_focus_scan(data):
    model = train(CFG.replace(use_focus=False), data[0], TrainConfig(epochs=0)).model
    with pytest.raises(ConfigError):
        probe_focus_trajectory(model, data[1])


def test_variant_definitions():
    full = VARIANTS["full"]
    dpcl = VARIANTS["w/o DPCL"]
    assert full.model_changes == {} and full.inference_changes == {}
    assert dpcl.model_changes == {"lambda_c": 0.0} and dpcl.inference_changes == {}
    assert CFG.replace(**dpcl.model_changes).to_dict() == {**CFG.to_dict(), "lambda_c": 0.0}
    assert VARIANTS["w/o AVPE"].inference_changes == {"enable_ap": False, "enable_vp": False}
    assert VARIANTS["w/o TDPP"].model_changes == {"use_temporal_path": False}
    assert VARIANTS["w/o AVFC"].model_changes == {"use_focus": False}
    for suite in SUITES.values():
        resolve_variants(suite)


def test_unknown_variant_lists_valid_names():
    with pytest.raises(KeyError, match="w/o TDPP"):
        resolve_variants(["w/o everything"])
    with pytest.raises(ValueError):
        resolve_variants([])


def test_ablate_table(data):
    rows = ablate(CFG, data[0], data[1], ["full", "w/o AVPE", "T=2"], TrainConfig(epochs=1, batch_size=8), seeds=(0,))
    assert [r["variant"] for r in rows] == ["full", "w/o AVPE", "T=2"]
    full, avpe, t2 = rows
    # inference-only variants reuse the trained model
    assert full["per_decoder"] == avpe["per_decoder"]
    assert avpe["accuracy"] == [avpe["per_decoder"][0]["qa"]]
    assert t2["changes"]["segments"] == 2
    assert all(len(r["accuracy"]) == 1 and r["std"] == 0 for r in rows)
