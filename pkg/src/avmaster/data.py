"""Planted-signal task generator, its answer oracle, and the AVM-FEAT archive.

A generated sample asks about one *target* modality. Codebook "events" are
planted into that modality's timeline inside a window; the other modality
gets independent decoy events. The question words carry a modality cue and
a subtype cue, so answering needs both modality preference and temporal
evidence.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .config import QTYPE_FOR_MODALITY, ConfigError, Sample

SUBTYPES = ("counting", "existence", "localization")

MAGIC = b"AVMF"
VERSION = 1
HEADER = struct.Struct("<4sBBHII")
DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
STREAMS = ("audio", "visual", "word", "sentence")


class ArchiveFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    T: int = 16
    D: int = 32
    L: int = 4
    C: int = 5
    K: int = 8
    noise_sigma: float = 0.1
    window: Optional[tuple] = None
    subtypes: tuple = SUBTYPES
    modalities: tuple = ("audio", "visual")
    audio_dim: Optional[int] = None
    visual_dim: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "subtypes", tuple(self.subtypes))
        object.__setattr__(self, "modalities", tuple(self.modalities))
        if self.window is not None:
            object.__setattr__(self, "window", tuple(int(w) for w in self.window))
        self.validate()

    @property
    def t0(self) -> int:
        return 0 if self.window is None else self.window[0]

    @property
    def t1(self) -> int:
        return self.T - 1 if self.window is None else self.window[1]

    @property
    def window_length(self) -> int:
        return self.t1 - self.t0 + 1

    @property
    def widths(self) -> dict:
        return {"audio": self.audio_dim or self.D, "visual": self.visual_dim or self.D, "text": self.D}

    def validate(self) -> None:
        if min(self.T, self.D, self.C) < 1:
            raise ConfigError("T, D and C must be positive")
        if self.L < 2:
            raise ConfigError("L must be at least 2 (modality cue and subtype cue)")
        if self.K < self.C:
            raise ConfigError(f"codebook size K={self.K} must be at least C={self.C}")
        if not 0 <= self.t0 <= self.t1 < self.T:
            raise ConfigError(f"window {self.window} must satisfy 0 <= t0 <= t1 < T={self.T}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        unknown = set(self.subtypes) - set(SUBTYPES)
        if unknown or not self.subtypes:
            raise ConfigError(f"subtypes must be a non-empty subset of {SUBTYPES}")
        if set(self.modalities) - {"audio", "visual"} or not self.modalities:
            raise ConfigError("modalities must be a non-empty subset of ('audio', 'visual')")
        if "counting" in self.subtypes and self.C - 1 > self.window_length:
            raise ConfigError(f"counting needs C-1={self.C - 1} slots but the window has {self.window_length}")
        if "localization" in self.subtypes and (self.C < 3 or self.window_length < 3):
            raise ConfigError("localization needs C >= 3 and a window of at least 3 segments")
        if "existence" in self.subtypes and self.C < 2:
            raise ConfigError("existence needs C >= 2")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["subtypes"] = list(self.subtypes)
        d["modalities"] = list(self.modalities)
        d["window"] = None if self.window is None else list(self.window)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TaskSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown task spec keys: {', '.join(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "TaskSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @cached_property
    def vocab(self) -> dict:
        """Frozen random vectors: per-modality codebooks, null rows and cues."""
        rng = np.random.default_rng([self.seed, 0x5EED])
        w = self.widths
        return {
            "codebook_audio": rng.standard_normal((self.K, w["audio"])),
            "codebook_visual": rng.standard_normal((self.K, w["visual"])),
            "null_audio": rng.standard_normal(w["audio"]),
            "null_visual": rng.standard_normal(w["visual"]),
            "cue_modality": {m: rng.standard_normal(self.D) for m in ("audio", "visual")},
            "cue_subtype": {q: rng.standard_normal(self.D) for q in SUBTYPES},
            "pad": rng.standard_normal(self.D),
        }

    def labels(self, subtype: str) -> range:
        return {"counting": range(self.C), "existence": range(2), "localization": range(3)}[subtype]

    @cached_property
    def combos(self) -> list:
        return [(m, q, y) for m in self.modalities for q in self.subtypes for y in self.labels(q)]


@dataclass
class PlantedConfig:
    """Where events sit in the target modality; enough to derive the answer."""

    subtype: str
    modality: str
    event_times: tuple
    event_ids: tuple
    window: tuple
    T: int
    decoy_times: tuple = ()
    decoy_ids: tuple = ()


def window_third(t: int, window: tuple) -> int:
    t0, t1 = window
    return (t - t0) * 3 // (t1 - t0 + 1)


def oracle_answer(config: PlantedConfig) -> int:
    """Answer implied by a planted configuration; independent of any model."""
    times = sorted(config.event_times)
    if config.subtype == "counting":
        return len(times)
    if config.subtype == "existence":
        return int(len(times) > 0)
    if config.subtype == "localization":
        if not times:
            raise ValueError("localization needs at least one event")
        return window_third(times[0], config.window)
    raise ValueError(f"unknown subtype {config.subtype!r}")


def _plant(spec: TaskSpec, subtype: str, y: int, rng) -> list:
    window = np.arange(spec.t0, spec.t1 + 1)
    cap = min(spec.C - 1, spec.window_length)
    if subtype == "counting":
        return sorted(rng.choice(window, size=y, replace=False).tolist())
    if subtype == "existence":
        if y == 0:
            return []
        n = int(rng.integers(1, cap + 1))
        return sorted(rng.choice(window, size=n, replace=False).tolist())
    thirds = np.array([window_third(t, (spec.t0, spec.t1)) for t in window])
    first = int(rng.choice(window[thirds == y]))
    later = window[window > first]
    n_extra = int(rng.integers(0, min(cap - 1, len(later)) + 1)) if cap > 1 else 0
    extra = rng.choice(later, size=n_extra, replace=False).tolist() if n_extra else []
    return sorted([first] + extra)


def render(spec: TaskSpec, planted: PlantedConfig, rng) -> dict:
    """Feature arrays (float32) for a planted configuration."""
    vocab = spec.vocab
    feats = {}
    for m in ("audio", "visual"):
        if m == planted.modality:
            times, ids = planted.event_times, planted.event_ids
        else:
            times, ids = planted.decoy_times, planted.decoy_ids
        seq = np.tile(vocab[f"null_{m}"], (spec.T, 1))
        for t, i in zip(times, ids):
            seq[t] = vocab[f"codebook_{m}"][i]
        seq = seq + spec.noise_sigma * rng.standard_normal(seq.shape)
        feats[m] = seq.astype(np.float32)
    cue_m = vocab["cue_modality"][planted.modality]
    cue_q = vocab["cue_subtype"][planted.subtype]
    word = np.stack([cue_m, cue_q] + [vocab["pad"]] * (spec.L - 2))
    feats["word"] = word.astype(np.float32)
    feats["sentence"] = (cue_m + cue_q)[None, :].astype(np.float32)
    return feats


def gen_sample(spec: TaskSpec, index: int) -> Sample:
    """Deterministic sample ``index`` of the task; labels are stratified in blocks."""
    n_combos = len(spec.combos)
    block, pos = divmod(index, n_combos)
    perm = np.random.default_rng([spec.seed, block, 1]).permutation(n_combos)
    modality, subtype, y = spec.combos[perm[pos]]
    rng = np.random.default_rng([spec.seed, index, 2])
    times = _plant(spec, subtype, y, rng)
    ids = rng.integers(0, spec.K, size=len(times)).tolist()
    n_decoy = int(rng.integers(0, min(spec.C - 1, spec.T) + 1))
    decoy_times = sorted(rng.choice(spec.T, size=n_decoy, replace=False).tolist())
    decoy_ids = rng.integers(0, spec.K, size=n_decoy).tolist()
    planted = PlantedConfig(
        subtype, modality, tuple(times), tuple(ids), (spec.t0, spec.t1), spec.T, tuple(decoy_times), tuple(decoy_ids)
    )
    answer = oracle_answer(planted)
    assert answer == y, (answer, y)
    feats = render(spec, planted, rng)
    sample = Sample.from_arrays(
        feats["audio"], feats["visual"], feats["word"], feats["sentence"], answer,
        qtype=f"{QTYPE_FOR_MODALITY[modality]}/{subtype}", id=f"{index:06d}",
    )
    sample.meta["planted"] = planted
    return sample


def generate(spec: TaskSpec, n: int, start: int = 0) -> list:
    return [gen_sample(spec, i) for i in range(start, start + n)]


def nearest_neighbor_answer(sample: Sample, spec: TaskSpec) -> int:
    """Non-neural reference solver: decode cues and events by nearest neighbour."""
    vocab = spec.vocab

    def nearest(x, table: dict):
        return min(table, key=lambda k: float(np.sum((x - table[k]) ** 2)))

    modality = nearest(sample.question.word[0], vocab["cue_modality"])
    subtype = nearest(sample.question.word[1], vocab["cue_subtype"])
    seq = (sample.audio if modality == "audio" else sample.visual).data
    table = {-1: vocab[f"null_{modality}"]}
    table.update({i: row for i, row in enumerate(vocab[f"codebook_{modality}"])})
    labels = [nearest(row, table) for row in seq]
    times = tuple(t for t, lab in enumerate(labels) if lab >= 0)
    planted = PlantedConfig(subtype, modality, times, (), (spec.t0, spec.t1), spec.T)
    return oracle_answer(planted)


def dataset_hash(samples: Sequence[Sample]) -> str:
    h = hashlib.sha256()
    for s in samples:
        for arr in (s.audio.data, s.visual.data, s.question.word, s.question.sentence):
            h.update(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        h.update(f"{s.answer}|{s.qtype}".encode())
    return h.hexdigest()


# --- AVM-FEAT tensor container -------------------------------------------


def write_tensor(path, array) -> None:
    array = np.asarray(array)
    if array.ndim == 1:
        array = array[None, :]
    if array.ndim != 2:
        raise ValueError(f"only 1-D or 2-D tensors can be stored, got shape {array.shape}")
    code = 1 if array.dtype == np.float64 else 0
    payload = np.ascontiguousarray(array, dtype=DTYPE_CODES[code])
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, code, 0, array.shape[0], array.shape[1]))
        f.write(payload.tobytes())


def read_tensor(path, expect_shape: Optional[tuple] = None) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArchiveFormatError(f"{path.name}: cannot read tensor file ({exc.strerror})") from exc
    if len(raw) < HEADER.size:
        raise ArchiveFormatError(f"{path.name}: truncated header ({len(raw)} bytes)")
    magic, version, code, reserved, rows, cols = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArchiveFormatError(f"{path.name}: bad magic {magic!r}")
    if version != VERSION:
        raise ArchiveFormatError(f"{path.name}: unsupported version {version}")
    if code not in DTYPE_CODES:
        raise ArchiveFormatError(f"{path.name}: unknown dtype code {code}")
    if reserved != 0:
        raise ArchiveFormatError(f"{path.name}: reserved field is {reserved}, expected 0")
    if expect_shape is not None and (rows, cols) != tuple(expect_shape):
        raise ArchiveFormatError(f"{path.name}: shape {rows}x{cols} disagrees with manifest {expect_shape[0]}x{expect_shape[1]}")
    dtype = DTYPE_CODES[code]
    expected = rows * cols * dtype.itemsize
    payload = raw[HEADER.size :]
    if len(payload) != expected:
        raise ArchiveFormatError(f"{path.name}: payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(rows, cols).copy()


@dataclass
class FeatureArchive:
    path: Path
    manifest: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.manifest["samples"])

    def __iter__(self) -> Iterator[Sample]:
        return read_archive(self.path)


def _tensor_name(sample_id: str, stream: str) -> str:
    return f"{sample_id}.{stream}.avmf"


def write_archive(samples: Iterable[Sample], path) -> FeatureArchive:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    records = []
    seen = set()
    for i, s in enumerate(samples):
        sid = s.id or f"{i:06d}"
        if sid in seen:
            raise ValueError(f"duplicate sample id {sid!r}")
        seen.add(sid)
        arrays = {"audio": s.audio.data, "visual": s.visual.data, "word": s.question.word, "sentence": s.question.sentence}
        for stream, arr in arrays.items():
            write_tensor(path / _tensor_name(sid, stream), np.asarray(arr, dtype=np.float32))
        records.append({
            "id": sid,
            "T": s.T,
            "L": s.L,
            "widths": {"audio": s.audio.data.shape[1], "visual": s.visual.data.shape[1], "text": s.question.word.shape[1]},
            "answer": int(s.answer),
            "qtype": s.qtype,
        })
    manifest = {"format": "AVM-FEAT", "version": VERSION, "count": len(records), "samples": records}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return FeatureArchive(path, manifest)


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath}: no such archive manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArchiveFormatError(f"{mpath}: manifest is not valid JSON ({exc})") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != "AVM-FEAT":
        raise ArchiveFormatError(f"{mpath}: not an AVM-FEAT manifest")
    if manifest.get("version") != VERSION:
        raise ArchiveFormatError(f"{mpath}: unsupported manifest version {manifest.get('version')!r}")
    if not isinstance(manifest.get("samples"), list):
        raise ArchiveFormatError(f"{mpath}: manifest has no sample list")
    return manifest


def read_archive(path) -> Iterator[Sample]:
    """Stream samples from an archive, validating every record against the manifest."""
    path = Path(path)
    manifest = read_manifest(path)
    for rec in manifest["samples"]:
        try:
            sid, T, L, widths = rec["id"], rec["T"], rec["L"], rec["widths"]
            answer, qtype = rec["answer"], rec["qtype"]
            shapes = {
                "audio": (T, widths["audio"]),
                "visual": (T, widths["visual"]),
                "word": (L, widths["text"]),
                "sentence": (1, widths["text"]),
            }
        except (KeyError, TypeError) as exc:
            raise ArchiveFormatError(f"manifest record {rec!r}: missing field {exc}") from exc
        try:
            arrays = {s: read_tensor(path / _tensor_name(sid, s), shapes[s]) for s in STREAMS}
        except ArchiveFormatError as exc:
            raise ArchiveFormatError(f"sample {sid!r}: {exc}") from exc
        try:
            yield Sample.from_arrays(arrays["audio"], arrays["visual"], arrays["word"], arrays["sentence"], answer, qtype, sid)
        except ValueError as exc:
            raise ArchiveFormatError(f"sample {sid!r}: {exc}") from exc


def load_archive(path) -> list:
    return list(read_archive(path))
