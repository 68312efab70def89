"""Configuration objects and plain value types shared across the package."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np


class ConfigError(ValueError):
    """Raised for invalid or inconsistent configuration values."""


@dataclass
class ModelConfig:
    """Hyperparameters of the dual-path model.

    ``dim`` is the shared feature width every input stream is projected to
    (512 in the full-size setting). ``n_templates`` is the number of rows of
    each learnable template bank. ``audio_dim``/``visual_dim``/``text_dim``
    are the native widths of precomputed features; ``None`` means "same as
    ``dim``".
    """

    dim: int = 512
    n_templates: int = 8
    max_segments: int = 60
    max_words: int = 16
    n_answers: int = 42
    n_heads: int = 8
    tau: float = 0.1
    lambda_qa: float = 1.0
    lambda_vp: float = 1.0
    lambda_ap: float = 1.0
    lambda_c: float = 1.0
    attn_shared: bool = True
    bias_shared: bool = False
    tie_bias_slots: bool = False
    ffn: bool = True
    audio_dim: Optional[int] = None
    visual_dim: Optional[int] = None
    text_dim: Optional[int] = None
    context_order: str = "avw"
    contrastive_mode: str = "cross"
    use_focus: bool = True
    use_temporal_path: bool = True
    use_preference_path: bool = True
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("dim", "n_templates", "max_segments", "max_words", "n_answers", "n_heads"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.dim % self.n_heads:
            raise ConfigError(f"dim={self.dim} is not divisible by n_heads={self.n_heads}")
        for name in ("audio_dim", "visual_dim", "text_dim"):
            value = getattr(self, name)
            if value is not None and (not isinstance(value, int) or value < 1):
                raise ConfigError(f"{name} must be a positive integer or null, got {value!r}")
        if not (self.tau > 0 and math.isfinite(self.tau)):
            raise ConfigError(f"tau must be positive, got {self.tau!r}")
        for name in ("lambda_qa", "lambda_vp", "lambda_ap", "lambda_c"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ConfigError(f"{name} must be a finite non-negative number, got {value!r}")
        if sorted(self.context_order) != ["a", "v", "w"]:
            raise ConfigError(f"context_order must be a permutation of 'avw', got {self.context_order!r}")
        if self.contrastive_mode not in ("cross", "literal"):
            raise ConfigError(f"contrastive_mode must be 'cross' or 'literal', got {self.contrastive_mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be 'float32' or 'float64', got {self.dtype!r}")

    @property
    def widths(self) -> dict:
        return {
            "audio": self.audio_dim or self.dim,
            "visual": self.visual_dim or self.dim,
            "text": self.text_dim or self.dim,
        }

    @property
    def lambdas(self) -> tuple:
        return (self.lambda_qa, self.lambda_vp, self.lambda_ap, self.lambda_c)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        data = json.loads(Path(path).read_text())
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """The small configuration used by gradient checks and quick tests."""
        base = dict(dim=8, n_templates=2, max_segments=4, max_words=3, n_answers=5, n_heads=2)
        base.update(overrides)
        return cls(**base)


@dataclass
class InferenceConfig:
    """Which decoders vote at inference time and how their outputs combine."""

    enable_qa: bool = True
    enable_ap: bool = True
    enable_vp: bool = True
    combine_mode: str = "add"

    def __post_init__(self):
        self.combine_mode = self.combine_mode.lower().replace("-", "")
        if self.combine_mode not in ("add", "mul", "wadd"):
            raise ConfigError(f"combine_mode must be add, mul or wadd, got {self.combine_mode!r}")
        if not (self.enable_qa or self.enable_ap or self.enable_vp):
            raise ConfigError("at least one decoder must be enabled for inference")


@dataclass
class LossBreakdown:
    l_qa: float
    l_vp: float
    l_ap: float
    l_c: float
    total: float

    @classmethod
    def from_parts(cls, parts, lambdas) -> "LossBreakdown":
        l_qa, l_vp, l_ap, l_c = (float(p) for p in parts)
        total = math.fsum(w * p for w, p in zip(lambdas, (l_qa, l_vp, l_ap, l_c)))
        return cls(l_qa, l_vp, l_ap, l_c, total)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


MODALITIES = ("audio", "visual")
QTYPE_FOR_MODALITY = {"audio": "A-QA", "visual": "V-QA"}


@dataclass
class FeatureSequence:
    modality: str
    data: np.ndarray

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ValueError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.data.ndim != 2 or self.data.shape[0] < 1:
            raise ValueError(f"{self.modality} features must be a non-empty T x D matrix, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError(f"{self.modality} features contain non-finite values")

    @property
    def T(self) -> int:
        return self.data.shape[0]


@dataclass
class QuestionFeatures:
    word: np.ndarray
    sentence: np.ndarray

    def __post_init__(self):
        if self.sentence.ndim == 1:
            self.sentence = self.sentence[None, :]
        if self.word.ndim != 2 or self.word.shape[0] < 1:
            raise ValueError(f"word features must be a non-empty L x D matrix, got shape {self.word.shape}")
        if self.sentence.shape != (1, self.word.shape[1]):
            raise ValueError(f"sentence feature must be 1 x {self.word.shape[1]}, got {self.sentence.shape}")
        if not (np.all(np.isfinite(self.word)) and np.all(np.isfinite(self.sentence))):
            raise ValueError("question features contain non-finite values")

    @property
    def L(self) -> int:
        return self.word.shape[0]


@dataclass
class Sample:
    audio: FeatureSequence
    visual: FeatureSequence
    question: QuestionFeatures
    answer: int
    qtype: str = "AV-QA"
    id: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.audio.T != self.visual.T:
            raise ValueError(f"audio has {self.audio.T} segments but visual has {self.visual.T}")
        if self.answer < 0:
            raise ValueError(f"answer index must be non-negative, got {self.answer}")

    @property
    def T(self) -> int:
        return self.audio.T

    @property
    def L(self) -> int:
        return self.question.L

    @classmethod
    def from_arrays(cls, audio, visual, word, sentence, answer, qtype="AV-QA", id="") -> "Sample":
        return cls(
            FeatureSequence("audio", np.asarray(audio)),
            FeatureSequence("visual", np.asarray(visual)),
            QuestionFeatures(np.asarray(word), np.asarray(sentence)),
            int(answer),
            qtype,
            id,
        )

    def truncated(self, n_segments: int) -> "Sample":
        """Keep only the first ``n_segments`` audio/visual segments."""
        return Sample(
            FeatureSequence("audio", self.audio.data[:n_segments]),
            FeatureSequence("visual", self.visual.data[:n_segments]),
            self.question,
            self.answer,
            self.qtype,
            self.id,
            self.meta,
        )


def check_sample(sample: Sample, config: ModelConfig) -> None:
    """Validate a sample against a model configuration."""
    widths = config.widths
    if sample.T > config.max_segments:
        raise ValueError(f"sample {sample.id!r} has T={sample.T} > max_segments={config.max_segments}")
    if sample.L > config.max_words:
        raise ValueError(f"sample {sample.id!r} has L={sample.L} > max_words={config.max_words}")
    if sample.audio.data.shape[1] != widths["audio"]:
        raise ValueError(f"sample {sample.id!r}: audio width {sample.audio.data.shape[1]} != {widths['audio']}")
    if sample.visual.data.shape[1] != widths["visual"]:
        raise ValueError(f"sample {sample.id!r}: visual width {sample.visual.data.shape[1]} != {widths['visual']}")
    if sample.question.word.shape[1] != widths["text"]:
        raise ValueError(f"sample {sample.id!r}: text width {sample.question.word.shape[1]} != {widths['text']}")
    if not 0 <= sample.answer < config.n_answers:
        raise ValueError(f"sample {sample.id!r}: answer {sample.answer} outside [0, {config.n_answers})")
