"""Scikit-learn style estimator over the training objectives.

``SequencePlanner`` is a fit/predict wrapper around the trainer: ``X`` is a
list of prefix token sequences, ``y`` the corresponding answer sequences
(EOS-terminated), and ``score`` is exact-match accuracy. Hyperparameters
live in ``__init__`` so ``get_params``/``set_params``/``clone`` and
grid-search tooling work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .errors import ConfigurationError
from .pathstar import GraphSample, Vocabulary, evaluate_model
from .training import RunConfig, Trainer
from .validation import check_token_sequences, check_X_y, infer_value_range


class SequencePlanner(BaseEstimator):
    """Decoder-only LM trained with a selectable objective on (prefix, answer) pairs.

    Parameters mirror ``RunConfig``; ``value_range_n=None`` infers the node
    vocabulary from the EOS id shared by all answers.
    """

    def __init__(self, objective="semformer", n_layers=6, n_heads=8, d_model=256,
                 d_ff=1024, max_seq_len=0, dtype="float32", k=4, latent_dim=32,
                 alpha=1.0, dec_layers=2, share_encoder=True, stop_grad_encoder=False,
                 rp_target_stop_grad=False, bow_coeff=0.1, n_future_heads=3,
                 train_prefix=False, lr=3e-4, weight_decay=0.01, warmup_steps=200,
                 clip_norm=1.0, batch_size=32, max_epochs=5, eval_every_steps=0,
                 stop_threshold=0.999, seed=0, value_range_n=None, validation_fraction=0.0,
                 verbose=0):
        self.objective = objective
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.d_model = d_model
        self.d_ff = d_ff
        self.max_seq_len = max_seq_len
        self.dtype = dtype
        self.k = k
        self.latent_dim = latent_dim
        self.alpha = alpha
        self.dec_layers = dec_layers
        self.share_encoder = share_encoder
        self.stop_grad_encoder = stop_grad_encoder
        self.rp_target_stop_grad = rp_target_stop_grad
        self.bow_coeff = bow_coeff
        self.n_future_heads = n_future_heads
        self.train_prefix = train_prefix
        self.lr = lr
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.eval_every_steps = eval_every_steps
        self.stop_threshold = stop_threshold
        self.seed = seed
        self.value_range_n = value_range_n
        self.validation_fraction = validation_fraction
        self.verbose = verbose

    # -- sklearn API --------------------------------------------------------

    def _run_config(self) -> RunConfig:
        return RunConfig(
            objective=self.objective, n_layers=self.n_layers, n_heads=self.n_heads,
            d_model=self.d_model, d_ff=self.d_ff, max_seq_len=self.max_seq_len,
            dtype=self.dtype, k=self.k, latent_dim=self.latent_dim, alpha=self.alpha,
            dec_layers=self.dec_layers, share_encoder=self.share_encoder,
            stop_grad_encoder=self.stop_grad_encoder,
            rp_target_stop_grad=self.rp_target_stop_grad, bow_coeff=self.bow_coeff,
            n_future_heads=self.n_future_heads, train_prefix=self.train_prefix,
            lr=self.lr, weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
            clip_norm=self.clip_norm, batch_size=self.batch_size,
            max_epochs=self.max_epochs, eval_every_steps=self.eval_every_steps,
            eval_subset=0, stop_threshold=self.stop_threshold, seed=self.seed,
        )

    @staticmethod
    def _to_samples(X, y) -> list[GraphSample]:
        return [GraphSample(prefix_tokens=p, answer_tokens=a, degree_d=0, path_len_l=0,
                            value_range_n=0) for p, a in zip(X, y)]

    def fit(self, X, y):
        """Train on (prefix, answer) token sequences; returns self."""
        X, y = check_X_y(X, y)
        n = self.value_range_n if self.value_range_n is not None else infer_value_range(y)
        samples = self._to_samples(X, y)
        holdout: list[GraphSample] = []
        if self.validation_fraction > 0:
            n_val = max(1, int(len(samples) * self.validation_fraction))
            holdout, samples = samples[:n_val], samples[n_val:]
        trainer = Trainer(self._run_config(), train_samples=samples,
                          test_samples=holdout, vocab=Vocabulary(n, 0))
        log = (lambda rec: print(f"[fit] {rec}")) if self.verbose else None
        summary = trainer.train(log=log)
        self.model_ = trainer.model
        self.vocab_ = trainer.vocab
        self.trainer_ = trainer
        self.fit_summary_ = summary
        self.answer_len_ = max(len(a) for a in y)
        self.n_features_in_ = len(X[0])
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigurationError("this SequencePlanner instance is not fitted yet")

    def predict(self, X) -> list[list[int]]:
        """Greedy-decode an answer (ending in EOS when emitted) per prefix."""
        self._check_fitted()
        X = check_token_sequences(X, "X")
        outs: list[list[int]] = [None] * len(X)  # type: ignore[list-item]
        by_len: dict[int, list[int]] = {}
        for i, row in enumerate(X):
            by_len.setdefault(len(row), []).append(i)
        for _, idxs in sorted(by_len.items()):
            for off in range(0, len(idxs), 256):
                chunk = idxs[off:off + 256]
                prefixes = np.array([X[i] for i in chunk], dtype=np.int64)
                for i, out in zip(chunk, self.model_.generate(prefixes, self.answer_len_)):
                    outs[i] = out
        return outs

    def score(self, X, y) -> float:
        """Exact-match accuracy of the greedy decodes against ``y``."""
        self._check_fitted()
        X, y = check_X_y(X, y)
        report = evaluate_model(self.model_, self._to_samples(X, y),
                                with_continuation=False)
        return report.exact_match

    def diagnostics(self, X, y) -> dict:
        """Exact match plus the shortcut signature (first node, continuation)."""
        self._check_fitted()
        X, y = check_X_y(X, y)
        report = evaluate_model(self.model_, self._to_samples(X, y))
        return report.to_dict()
