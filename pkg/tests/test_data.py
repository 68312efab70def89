import dataclasses
import json

import numpy as np
import pytest
import torch
from scipy.stats import chisquare

from avmaster import ArchiveFormatError, ConfigError, ModelConfig, Sample, TaskSpec, gen_sample, generate, init_parameters
from avmaster.data import (
    HEADER,
    PlantedConfig,
    load_archive,
    nearest_neighbor_answer,
    oracle_answer,
    read_archive,
    read_tensor,
    render,
    write_archive,
    write_tensor,
)
from avmaster.model import stack_samples

SPEC = TaskSpec(T=12, D=16, L=3, C=5, seed=4)


def same_sample(a: Sample, b: Sample) -> bool:
    arrays = lambda s: (s.audio.data, s.visual.data, s.question.word, s.question.sentence)  # noqa: E731
    return (
        all(x.dtype == y.dtype and np.array_equal(x, y) for x, y in zip(arrays(a), arrays(b)))
        and (a.answer, a.qtype, a.id) == (b.answer, b.qtype, b.id)
    )


def test_oracle_answer_definitions():
    cfg = lambda sub, times: PlantedConfig(sub, "audio", times, (0,) * len(times), (0, 11), 12)  # noqa: E731
    assert oracle_answer(cfg("counting", (1, 5, 9))) == 3
    assert oracle_answer(cfg("counting", ())) == 0
    assert oracle_answer(cfg("existence", ())) == 0
    assert oracle_answer(cfg("existence", (4,))) == 1
    # thirds of 0..11 are {0-3}, {4-7}, {8-11}
    assert oracle_answer(cfg("localization", (7, 10))) == 1
    assert [oracle_answer(cfg("localization", (t,))) for t in (0, 3, 4, 8, 11)] == [0, 0, 1, 2, 2]


def test_empty_counting_plant_answers_zero():
    zero = [s for s in generate(SPEC, 60) if s.qtype.endswith("counting") and s.answer == 0]
    assert zero
    for s in zero:
        assert s.meta["planted"].event_times == ()


def test_generation_is_deterministic():
    for i in (0, 7, 123):
        assert same_sample(gen_sample(SPEC, i), gen_sample(SPEC, i))
    assert not np.array_equal(gen_sample(SPEC, 0).audio.data, gen_sample(dataclasses.replace(SPEC, seed=5), 0).audio.data)


def test_counting_labels_are_balanced():
    spec = dataclasses.replace(SPEC, subtypes=("counting",))
    labels = np.array([s.answer for s in generate(spec, 1000)])
    hist = np.bincount(labels, minlength=spec.C)
    assert np.all(np.abs(hist / 1000 - 1 / spec.C) <= 0.05)
    assert chisquare(hist).pvalue > 0.01


def test_noise_free_task_is_solved_by_nearest_neighbour():
    spec = dataclasses.replace(SPEC, noise_sigma=0.0)
    samples = generate(spec, 300)
    assert all(nearest_neighbor_answer(s, spec) == s.answer for s in samples)


def test_answer_depends_only_on_target_modality():
    spec = dataclasses.replace(SPEC, noise_sigma=0.0)
    rng = np.random.default_rng(0)
    for s in generate(spec, 100):
        planted = s.meta["planted"]
        n = int(rng.integers(0, spec.C))
        fresh = dataclasses.replace(
            planted,
            decoy_times=tuple(sorted(rng.choice(spec.T, n, replace=False).tolist())),
            decoy_ids=tuple(rng.integers(0, spec.K, n).tolist()),
        )
        feats = render(spec, fresh, rng)
        target = planted.modality
        assert np.array_equal(feats[target], getattr(s, target).data)
        redone = Sample.from_arrays(feats["audio"], feats["visual"], feats["word"], feats["sentence"], s.answer, s.qtype)
        assert oracle_answer(fresh) == s.answer
        assert nearest_neighbor_answer(redone, spec) == s.answer


def test_window_restricts_events():
    spec = TaskSpec(T=16, D=8, L=2, C=5, window=(11, 15))
    for s in generate(spec, 60):
        assert all(11 <= t <= 15 for t in s.meta["planted"].event_times)


@pytest.mark.parametrize(
    "bad",
    [
        dict(T=6, C=5, window=(0, 2)),
        dict(T=8, window=(5, 9)),
        dict(K=3, C=5),
        dict(noise_sigma=-1.0),
        dict(L=1),
        dict(subtypes=("sorting",)),
    ],
)
def test_invalid_specs(bad):
    with pytest.raises(ConfigError):
        TaskSpec(**bad)


def test_spec_json_roundtrip(tmp_path):
    spec = TaskSpec(T=10, window=(2, 8), subtypes=("counting", "existence"), audio_dim=6)
    spec.to_json(tmp_path / "s.json")
    assert TaskSpec.from_json(tmp_path / "s.json") == spec


def test_archive_roundtrip_ten(tmp_path):
    samples = generate(SPEC, 10)
    archive = write_archive(samples, tmp_path / "a")
    assert len(archive) == 10
    assert all(same_sample(a, b) for a, b in zip(samples, read_archive(tmp_path / "a")))


def test_archive_roundtrip_hundred_random(tmp_path, rng):
    samples = []
    for i in range(100):
        T, L = int(rng.integers(1, 8)), int(rng.integers(1, 5))
        samples.append(Sample.from_arrays(
            rng.standard_normal((T, 5)).astype(np.float32), rng.standard_normal((T, 7)).astype(np.float32),
            rng.standard_normal((L, 3)).astype(np.float32), rng.standard_normal((1, 3)).astype(np.float32),
            int(rng.integers(42)), qtype=f"q{i % 3}", id=f"s{i}",
        ))
    write_archive(samples, tmp_path / "r")
    loaded = load_archive(tmp_path / "r")
    assert len(loaded) == 100
    assert all(same_sample(a, b) for a, b in zip(samples, loaded))


def test_manifest_layout(tmp_path):
    write_archive(generate(SPEC, 2), tmp_path / "m")
    manifest = json.loads((tmp_path / "m" / "manifest.json").read_text())
    assert manifest["format"] == "AVM-FEAT" and manifest["version"] == 1 and manifest["count"] == 2
    assert set(manifest["samples"][0]) == {"id", "T", "L", "widths", "answer", "qtype"}
    raw = (tmp_path / "m" / "000000.audio.avmf").read_bytes()
    assert raw[:4] == b"AVMF" and raw[4] == 1 and raw[5] == 0
    assert HEADER.unpack(raw[:16])[4:] == (12, 16)
    assert len(raw) == 16 + 12 * 16 * 4


@pytest.mark.parametrize("offset", range(16))
def test_corrupt_header_byte_is_a_format_error(tmp_path, offset):
    write_archive(generate(SPEC, 3), tmp_path / "c")
    target = tmp_path / "c" / "000001.visual.avmf"
    raw = bytearray(target.read_bytes())
    raw[offset] ^= 0xFF
    target.write_bytes(bytes(raw))
    with pytest.raises(ArchiveFormatError, match="000001"):
        load_archive(tmp_path / "c")


def test_truncated_and_mismatched_records(tmp_path):
    write_archive(generate(SPEC, 2), tmp_path / "t")
    f = tmp_path / "t" / "000000.word.avmf"
    f.write_bytes(f.read_bytes()[:-4])
    with pytest.raises(ArchiveFormatError, match="000000.*payload"):
        load_archive(tmp_path / "t")

    write_archive(generate(SPEC, 2), tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    manifest["samples"][1]["T"] = 11
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ArchiveFormatError, match="000001.*shape"):
        load_archive(tmp_path / "s")

    (tmp_path / "s" / "000001.audio.avmf").unlink()
    with pytest.raises(ArchiveFormatError, match="000001"):
        load_archive(tmp_path / "s")

    (tmp_path / "s" / "manifest.json").write_text("{not json")
    with pytest.raises(ArchiveFormatError):
        load_archive(tmp_path / "s")
    with pytest.raises(FileNotFoundError):
        load_archive(tmp_path / "nowhere")


def test_tensor_dtypes(tmp_path):
    x = np.arange(6, dtype=np.float64).reshape(2, 3) / 7
    write_tensor(tmp_path / "x.avmf", x)
    assert np.array_equal(read_tensor(tmp_path / "x.avmf"), x)
    write_tensor(tmp_path / "y.avmf", x.astype(np.float32))
    assert read_tensor(tmp_path / "y.avmf").dtype == np.float32


def test_real_width_archive_projects_to_model_width(tmp_path):
    spec = TaskSpec(T=60, D=16, L=4, C=5, audio_dim=128, visual_dim=512, seed=1)
    samples = generate(spec, 2)
    write_archive(samples, tmp_path / "wide")
    loaded = load_archive(tmp_path / "wide")
    assert loaded[0].audio.data.shape == (60, 128) and loaded[0].visual.data.shape == (60, 512)
    cfg = ModelConfig(dim=16, n_templates=2, n_heads=2, max_segments=60, max_words=4, n_answers=5,
                      audio_dim=128, visual_dim=512, text_dim=16)
    model = init_parameters(cfg)
    a, v, w, s = stack_samples(loaded)
    with torch.no_grad():
        assert model.proj_audio(a).shape == (2, 60, 16)
        assert model.proj_visual(v).shape == (2, 60, 16)
        assert model(a, v, w, s).logits_qa.shape == (2, 5)


def test_duplicate_ids_rejected(tmp_path):
    s = gen_sample(SPEC, 0)
    with pytest.raises(ValueError, match="duplicate"):
        write_archive([s, s], tmp_path / "d")
