"""Scikit-learn style wrapper around the network and its training loop."""

from typing import List

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from ..errors import ShapeError
from ..lattice import PenaltyConfig
from ..metrics import orc_wer_example
from ..segmenter import Turn, build_targets
from ..simulator import MixtureExample
from ..vocab import Vocab, n_encoder_frames
from .network import ModelConfig, STSModel
from .training import TrainConfig, train


class STSTransducer(BaseEstimator):
    """Two-channel streaming transducer with sot/eot turn tokens.

    ``X`` is a sequence of raw feature matrices (``T_raw x feature_dim``),
    ``y`` the matching sequence of turn lists. ``predict`` returns decoded
    channel hypotheses with per-token emission frames.
    """

    def __init__(
        self,
        feature_dim=8,
        hidden_dim=16,
        joint_dim=16,
        vocab_size=16,
        gamma=0.0,
        fastemit_lambda=0.0,
        penalty_alpha=0.0,
        penalty_tau=3,
        learning_rate=0.1,
        warmup_steps=20,
        hold_steps=2500,
        decay_factor=0.997,
        max_steps=5000,
        batch_size=4,
        grad_clip=5.0,
        max_symbols_per_frame=3,
        random_state=0,
    ):
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.joint_dim = joint_dim
        self.vocab_size = vocab_size
        self.gamma = gamma
        self.fastemit_lambda = fastemit_lambda
        self.penalty_alpha = penalty_alpha
        self.penalty_tau = penalty_tau
        self.learning_rate = learning_rate
        self.warmup_steps = warmup_steps
        self.hold_steps = hold_steps
        self.decay_factor = decay_factor
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.grad_clip = grad_clip
        self.max_symbols_per_frame = max_symbols_per_frame
        self.random_state = random_state

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            feature_dim=self.feature_dim,
            hidden_dim=self.hidden_dim,
            joint_dim=self.joint_dim,
            vocab_size=self.vocab_size,
            seed=self.random_state,
        )

    def _train_config(self) -> TrainConfig:
        penalty = PenaltyConfig(self.penalty_alpha, self.penalty_tau) if self.penalty_alpha > 0 else None
        return TrainConfig(
            gamma=self.gamma,
            fastemit_lambda=self.fastemit_lambda,
            penalty=penalty,
            learning_rate=self.learning_rate,
            warmup_steps=self.warmup_steps,
            hold_steps=self.hold_steps,
            decay_factor=self.decay_factor,
            max_steps=self.max_steps,
            batch_size=self.batch_size,
            grad_clip=self.grad_clip,
            seed=self.random_state,
        )

    def _check_X(self, X) -> List[np.ndarray]:
        if isinstance(X, np.ndarray) and X.ndim == 2:
            X = [X]
        out = [check_array(x, dtype=np.float64, ensure_min_samples=1) for x in X]
        for x in out:
            if x.shape[1] != self.feature_dim:
                raise ShapeError("feature dimension mismatch", expected=self.feature_dim, got=x.shape[1])
        return out

    def _examples(self, X, y) -> List[MixtureExample]:
        X = self._check_X(X)
        if len(X) != len(y):
            raise ShapeError("X and y must have the same length", n_X=len(X), n_y=len(y))
        vocab = Vocab(self.vocab_size)
        examples = []
        for i, (x, turns) in enumerate(zip(X, y)):
            turns = [t if isinstance(t, Turn) else Turn.from_dict(t) for t in turns]
            targets = build_targets(turns, vocab, n_frames=n_encoder_frames(x.shape[0]))
            examples.append(MixtureExample(f"ex-{i:05d}", x, turns, targets, {}))
        return examples

    def fit(self, X, y):
        """Train on ``(X, y)``, cycling over examples in their given order."""
        examples = self._examples(X, y)
        self.model_ = STSModel(self._model_config())
        self.vocab_ = self.model_.vocab
        self.log_ = train(self.model_, lambda i: examples[i % len(examples)], self._train_config())
        self.n_features_in_ = self.feature_dim
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return [self.model_.greedy_decode(x, self.max_symbols_per_frame) for x in self._check_X(X)]

    def transform(self, X):
        """Recognition-encoder outputs, one ``n_channels x T x D`` array per input."""
        check_is_fitted(self, "model_")
        return [np.stack(self.model_.encode(x).h) for x in self._check_X(X)]

    def score(self, X, y) -> float:
        """One minus the pooled ORC WER."""
        hyps = self.predict(X)
        errors = ref_len = 0
        for h, turns in zip(hyps, y):
            turns = [t if isinstance(t, Turn) else Turn.from_dict(t) for t in turns]
            _, counts = orc_wer_example(turns, h, self.vocab_)
            errors += counts.errors
            ref_len += counts.reference_length
        return 1.0 - errors / max(ref_len, 1)
