"""Input validation helpers for the estimator interface."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .config import Sample
from .data import FeatureArchive, load_archive


def check_samples(X, y=None):
    """Coerce ``X`` to a list of :class:`Sample` and ``y`` to an int array.

    ``X`` may be a sequence of samples, an archive directory path or a
    :class:`FeatureArchive`. When ``y`` is given it overrides the answers
    stored in the samples.
    """
    if isinstance(X, (str, Path)):
        samples = load_archive(X)
    elif isinstance(X, FeatureArchive):
        samples = load_archive(X.path)
    else:
        samples = list(X)
    if not samples:
        raise ValueError("X contains no samples")
    bad = [type(s).__name__ for s in samples if not isinstance(s, Sample)]
    if bad:
        raise TypeError(f"X must contain Sample objects, got {bad[0]}")
    if y is None:
        y = np.array([s.answer for s in samples], dtype=np.int64)
    else:
        y = np.asarray(y)
        if y.ndim != 1 or len(y) != len(samples):
            raise ValueError(f"y must be 1-D with {len(samples)} entries, got shape {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise ValueError("y must contain integer answer indices")
            y = y.astype(np.int64)
        if (y < 0).any():
            raise ValueError("answer indices must be non-negative")
        samples = [
            s if s.answer == int(t) else Sample(s.audio, s.visual, s.question, int(t), s.qtype, s.id, s.meta)
            for s, t in zip(samples, y)
        ]
    return samples, y


def infer_widths(samples) -> dict:
    """Common native widths of all samples, or a ValueError naming the offender."""
    first = samples[0]
    widths = {
        "audio": first.audio.data.shape[1],
        "visual": first.visual.data.shape[1],
        "text": first.question.word.shape[1],
    }
    for s in samples:
        got = {"audio": s.audio.data.shape[1], "visual": s.visual.data.shape[1], "text": s.question.word.shape[1]}
        if got != widths:
            raise ValueError(f"sample {s.id!r} has widths {got}, expected {widths}")
    return widths
