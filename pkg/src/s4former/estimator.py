"""scikit-learn compatible wrappers.

``S4DTransformer`` applies a fixed (randomly initialised) S4D layer to
sequences; ``S4SequenceTagger`` trains an encoder to label every step.
Both take arrays shaped ``(n_samples, n_steps, n_features)``.
"""

from __future__ import annotations

import io

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_tensor, check_sequence_labels, check_sequences
from .conv_module import build_encoder
from .s4d import init_s4d
from .tasks import IGNORE_INDEX, TaskData, TaskSpec, TaskSplit
from .training import ModelConfig, SequenceModel, TrainConfig, train


class S4DTransformer(TransformerMixin, BaseEstimator):
    """Channel-wise S4D filter bank as a transformer.

    Parameters
    ----------
    n_state : int, default=4
        State size N per channel.
    scheme : {"real", "lin"}, default="real"
        Initialisation of the tied diagonal recurrence.
    mode : {"conv", "scan"}, default="conv"
        Execution path; both give the same output.
    dt_min, dt_max : float
        Range of the log-uniform timestep initialisation.
    random_state : int, default=0
    """

    def __init__(self, n_state=4, scheme="real", mode="conv", dt_min=1e-3, dt_max=1e-1, random_state=0):
        self.n_state = n_state
        self.scheme = scheme
        self.mode = mode
        self.dt_min = dt_min
        self.dt_max = dt_max
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_sequences(X)
        self.n_features_in_ = X.shape[2]
        self.layer_ = init_s4d(self.scheme, self.n_state, self.n_features_in_, seed=self.random_state,
                               dt_min=self.dt_min, dt_max=self.dt_max)
        return self

    def transform(self, X):
        check_is_fitted(self, "layer_")
        X = check_sequences(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[2]} features, expected {self.n_features_in_}")
        with torch.no_grad():
            return self.layer_(as_tensor(X), mode=self.mode).numpy()


class S4SequenceTagger(ClassifierMixin, BaseEstimator):
    """Per-step classifier built from S4D-augmented encoder blocks.

    ``y`` holds one integer label per step; steps labelled ``-100`` are
    ignored in training and scoring.
    """

    def __init__(
        self,
        approach="dir",
        scheme="real",
        n_state=4,
        width=64,
        kernel_size=4,
        rep_left_context=8,
        n_blocks=2,
        with_attention=False,
        context="online",
        lr=1e-3,
        max_steps=500,
        batch_size=16,
        random_state=0,
    ):
        self.approach = approach
        self.scheme = scheme
        self.n_state = n_state
        self.width = width
        self.kernel_size = kernel_size
        self.rep_left_context = rep_left_context
        self.n_blocks = n_blocks
        self.with_attention = with_attention
        self.context = context
        self.lr = lr
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.random_state = random_state

    def _model_config(self, n_classes) -> ModelConfig:
        return ModelConfig(
            approach=self.approach, scheme=self.scheme, n_state=self.n_state, h=self.width,
            kernel_size=self.kernel_size, rep_left_context=self.rep_left_context,
            blocks=self.n_blocks, with_attention=self.with_attention, context=self.context,
            vocab=n_classes,
        )

    def fit(self, X, y):
        X = check_sequences(X)
        y = check_sequence_labels(y, X)
        labelled = y[y != IGNORE_INDEX]
        self.classes_ = np.arange(int(labelled.max()) + 1)
        self.n_features_in_ = X.shape[2]
        cfg = self._model_config(len(self.classes_))
        cfg.validate()
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            encoder = build_encoder([cfg.module_spec()] * cfg.blocks, cfg.with_attention, seed=self.random_state)
            self.model_ = SequenceModel(encoder, len(self.classes_), n_inputs=self.n_features_in_)
        split = TaskSplit(None, torch.from_numpy(y), len(self.classes_), features=as_tensor(X))
        data = TaskData(TaskSpec(seq_len=X.shape[1], vocab=len(self.classes_)), split, split)
        steps = max(1, self.max_steps)
        tcfg = TrainConfig(lr=self.lr, steps=steps, batch_size=self.batch_size,
                           seed=self.random_state, eval_every=steps)
        self.history_ = train(self.model_, data, tcfg, stream=io.StringIO())
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = check_sequences(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[2]} features, expected {self.n_features_in_}")
        self.model_.eval()
        with torch.no_grad():
            return torch.softmax(self.model_(as_tensor(X)), dim=-1).numpy()

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(-1)]

    def score(self, X, y, sample_weight=None):
        """Accuracy over labelled steps."""
        X = check_sequences(X)
        y = check_sequence_labels(y, X)
        mask = y != IGNORE_INDEX
        return float((self.predict(X)[mask] == y[mask]).mean())
