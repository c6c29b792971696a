"""scikit-learn style wrapper around configuration, training and scoring.

``X`` is always an ``[n_sequences, L]`` array of token ids; there is no ``y``
because the targets are the next tokens of ``X`` itself.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_tokens
from .config import RunConfig, TrainConfig
from .errors import ConfigError
from .model import ModelConfig, RopeLM
from .objective import ObjectiveMode, clm_loss
from .numerics import Tensor
from .tasks import TaskConfig
from .trainer import train
from .views import SamplerConfig


class RopeDistillLM(BaseEstimator):
    """Decoder-only RoPE language model trained with an optional perturbed-view regulariser.

    With ``variant="ours_reverse_kl"`` each step adds ``lam`` times the reverse
    KL between a perturbed-index pass and the detached standard pass.
    """

    def __init__(self, variant="ours_reverse_kl", lam=1.0, perturbation="skip", Y=None,
                 steps=200, batch_size=16, lr=3e-4, weight_decay=0.1, grad_clip=1.0,
                 d_model=64, n_heads=4, n_layers=2, mlp_hidden=128, max_len=1024,
                 vocab_size=64, rope_base=10000.0, dropout_p=0.0, seed=0):
        self.variant = variant
        self.lam = lam
        self.perturbation = perturbation
        self.Y = Y
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.mlp_hidden = mlp_hidden
        self.max_len = max_len
        self.vocab_size = vocab_size
        self.rope_base = rope_base
        self.dropout_p = dropout_p
        self.seed = seed

    def _run_config(self, L: int) -> RunConfig:
        run = RunConfig(
            model=ModelConfig(vocab_size=self.vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                              n_layers=self.n_layers, max_len=self.max_len, mlp_hidden=self.mlp_hidden,
                              rope_base=self.rope_base, dropout_p=self.dropout_p, seed=self.seed),
            objective=ObjectiveMode(self.variant, self.lam),
            sampler=SamplerConfig(kind=self.perturbation, Y=self.Y),
            train=TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                              weight_decay=self.weight_decay, grad_clip=self.grad_clip, seed=self.seed,
                              data="array"),
            task=TaskConfig(L=max(L, 16), vocab_size=self.vocab_size),
        )
        problems = [p for p in run.validate() if not p.startswith("task.")]
        if problems:
            raise ConfigError(problems)
        return run

    def fit(self, X, y=None):
        """Train on the rows of ``X``; each step samples ``batch_size`` rows with replacement."""
        X = check_tokens(X, self.vocab_size, self.max_len)
        run = self._run_config(X.shape[1])
        result = train(run, None, data=X)
        self.run_config_ = run
        self.params_ = result.checkpoint.params
        self.history_ = result.history
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def model_(self) -> RopeLM:
        check_is_fitted(self, "params_")
        return RopeLM(self.run_config_.model, self.params_)

    def predict_log_proba(self, X, r=None) -> np.ndarray:
        """Log next-token distributions ``[n, L, vocab]``; ``r`` overrides the RoPE indices."""
        check_is_fitted(self, "params_")
        X = check_tokens(X, self.vocab_size, self.max_len, min_len=1)
        return self.model_.log_probs(X, r)

    def predict(self, X) -> np.ndarray:
        """Greedy next token at every position, ``[n, L]``."""
        return np.argmax(self.predict_log_proba(X), axis=-1)

    def score(self, X, y=None) -> float:
        """Negative mean next-token NLL in nats (higher is better)."""
        X = check_tokens(X, self.vocab_size, self.max_len)
        logp = self.predict_log_proba(X)
        return -float(clm_loss(Tensor(logp), X).item())
