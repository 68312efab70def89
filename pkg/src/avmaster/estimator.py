"""scikit-learn style wrapper around the model and training harness."""

from __future__ import annotations

import dataclasses

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .config import InferenceConfig, ModelConfig
from .harness import TrainConfig, evaluate, predict_distributions, train
from .objectives import combine
from .validation import check_samples, infer_widths


class AVMasterClassifier(ClassifierMixin, BaseEstimator):
    """Audio-visual question answering classifier.

    ``X`` is a sequence of :class:`~avmaster.config.Sample` objects (or an
    AVM-FEAT archive path); targets default to the answers stored in the
    samples. Native feature widths, the maximum segment and word counts and
    the number of answers are read from the training data unless given.

    Parameters
    ----------
    dim, n_templates, n_heads : int
        Shared feature width, template rows and attention heads.
    tau : float
        Contrastive temperature.
    lambda_qa, lambda_vp, lambda_ap, lambda_c : float
        Loss weights.
    attn_shared, bias_shared : bool
        Share attention blocks / learned biases across scan steps.
    use_focus, use_temporal_path, use_preference_path : bool
        Component switches used by ablations.
    epochs, batch_size, lr, lr_decay, lr_interval : training schedule.
    combine_mode : {"add", "mul", "wadd"}
        How decoder distributions are merged at prediction time.
    n_answers, max_segments, max_words : int or None
        Override what ``fit`` would infer from the data.
    random_state : int
        Seeds parameter initialization and batch order.
    """

    def __init__(
        self,
        dim=512,
        n_templates=8,
        n_heads=8,
        tau=0.1,
        lambda_qa=1.0,
        lambda_vp=1.0,
        lambda_ap=1.0,
        lambda_c=1.0,
        attn_shared=True,
        bias_shared=False,
        use_focus=True,
        use_temporal_path=True,
        use_preference_path=True,
        epochs=30,
        batch_size=32,
        lr=1e-4,
        lr_decay=0.1,
        lr_interval=8,
        combine_mode="add",
        enable_qa=True,
        enable_ap=True,
        enable_vp=True,
        n_answers=None,
        max_segments=None,
        max_words=None,
        dtype="float32",
        random_state=0,
    ):
        self.dim = dim
        self.n_templates = n_templates
        self.n_heads = n_heads
        self.tau = tau
        self.lambda_qa = lambda_qa
        self.lambda_vp = lambda_vp
        self.lambda_ap = lambda_ap
        self.lambda_c = lambda_c
        self.attn_shared = attn_shared
        self.bias_shared = bias_shared
        self.use_focus = use_focus
        self.use_temporal_path = use_temporal_path
        self.use_preference_path = use_preference_path
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_decay = lr_decay
        self.lr_interval = lr_interval
        self.combine_mode = combine_mode
        self.enable_qa = enable_qa
        self.enable_ap = enable_ap
        self.enable_vp = enable_vp
        self.n_answers = n_answers
        self.max_segments = max_segments
        self.max_words = max_words
        self.dtype = dtype
        self.random_state = random_state

    def _model_config(self, samples, y) -> ModelConfig:
        widths = infer_widths(samples)
        return ModelConfig(
            dim=self.dim,
            n_templates=self.n_templates,
            n_heads=self.n_heads,
            max_segments=self.max_segments or max(s.T for s in samples),
            max_words=self.max_words or max(s.L for s in samples),
            n_answers=self.n_answers or int(y.max()) + 1,
            tau=self.tau,
            lambda_qa=self.lambda_qa,
            lambda_vp=self.lambda_vp,
            lambda_ap=self.lambda_ap,
            lambda_c=self.lambda_c,
            attn_shared=self.attn_shared,
            bias_shared=self.bias_shared,
            use_focus=self.use_focus,
            use_temporal_path=self.use_temporal_path,
            use_preference_path=self.use_preference_path,
            audio_dim=widths["audio"],
            visual_dim=widths["visual"],
            text_dim=widths["text"],
            dtype=self.dtype,
            seed=self.random_state,
        )

    def _inference_config(self) -> InferenceConfig:
        return InferenceConfig(self.enable_qa, self.enable_ap, self.enable_vp, self.combine_mode)

    def fit(self, X, y=None):
        samples, y = check_samples(X, y)
        self.config_ = self._model_config(samples, y)
        train_config = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_decay=self.lr_decay,
            lr_interval=self.lr_interval,
            seed=self.random_state,
        )
        result = train(self.config_, samples, train_config)
        self.model_ = result.model
        self.manifest_ = result.manifest
        self.classes_ = np.arange(self.config_.n_answers)
        self.n_features_in_ = self.config_.dim
        return self

    def _distributions(self, X):
        check_is_fitted(self, "model_")
        samples, _ = check_samples(X)
        return samples, predict_distributions(self.model_, samples)

    def _resolved_ic(self) -> InferenceConfig:
        ic = self._inference_config()
        if not self.config_.use_preference_path:
            ic = dataclasses.replace(ic, enable_qa=True, enable_ap=False, enable_vp=False)
        return ic

    def predict_proba(self, X):
        """Combined answer distribution, one row per sample."""
        _, dists = self._distributions(X)
        _, combined = combine(dists.get("qa"), dists.get("ap"), dists.get("vp"), self._resolved_ic())
        return combined

    def predict(self, X):
        _, dists = self._distributions(X)
        answers, _ = combine(dists.get("qa"), dists.get("ap"), dists.get("vp"), self._resolved_ic())
        return answers

    def transform(self, X):
        """Fused temporal-path features, ``(N, dim)``."""
        check_is_fitted(self, "model_")
        samples, _ = check_samples(X)
        self.model_.eval()
        with torch.no_grad():
            fused = self.model_.forward_samples(samples).fused
        return fused.double().numpy()

    def score(self, X, y=None, sample_weight=None):
        samples, y = check_samples(X, y)
        return float(np.average(self.predict(samples) == y, weights=sample_weight))

    def evaluate(self, X) -> dict:
        """Accuracy overall, per question type and per decoder."""
        check_is_fitted(self, "model_")
        samples, _ = check_samples(X)
        return evaluate(self.model_, samples, self._resolved_ic())
