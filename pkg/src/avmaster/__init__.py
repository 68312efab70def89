"""Dual-path audio-visual question answering in PyTorch."""

from .config import (
    ConfigError,
    FeatureSequence,
    InferenceConfig,
    LossBreakdown,
    ModelConfig,
    QuestionFeatures,
    Sample,
)
from .data import (
    ArchiveFormatError,
    FeatureArchive,
    TaskSpec,
    gen_sample,
    generate,
    load_archive,
    oracle_answer,
    read_archive,
    write_archive,
)
from .estimator import AVMasterClassifier
from .gradcheck import gradient_check
from .harness import (
    TrainConfig,
    ablate,
    evaluate,
    load_checkpoint,
    probe_focus_trajectory,
    save_checkpoint,
    train,
)
from .model import AVMaster, init_parameters

__version__ = "0.1.0"

__all__ = [
    "AVMaster",
    "AVMasterClassifier",
    "ArchiveFormatError",
    "ConfigError",
    "FeatureArchive",
    "FeatureSequence",
    "InferenceConfig",
    "LossBreakdown",
    "ModelConfig",
    "QuestionFeatures",
    "Sample",
    "TaskSpec",
    "TrainConfig",
    "ablate",
    "evaluate",
    "gen_sample",
    "generate",
    "gradient_check",
    "init_parameters",
    "load_archive",
    "load_checkpoint",
    "oracle_answer",
    "probe_focus_trajectory",
    "read_archive",
    "save_checkpoint",
    "train",
    "write_archive",
]
