"""The training objectives, as interchangeable strategies over one backbone.

Every objective owns a ``TransformerLM`` plus its documented extra pieces and
exposes the same surface:

    loss(samples)                 -> dict of scalar loss Tensors ("total", ...)
    generate(prefixes, max_new, forced=None) -> list of generated id lists
    fits(prefix_len, answer_len)  -> whether a sample fits the context window
    parameters() / named_parameters()

Teacher forcing is training-only: no ``generate`` path ever reads reference
answer tokens except the explicitly ``forced`` context used by diagnostics.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .pathstar import Vocabulary
from .semformer import (
    PlannedBatch,
    SemformerConfig,
    SemformerModules,
    build_planned_batch,
    lm_loss_from_batch,
    semformer_loss,
)
from .tensor import Parameter, Tensor
from .transformer import ModelConfig, TransformerLM, batched_greedy_decode

OBJECTIVE_KINDS = ("standard", "pause", "bow", "teacherless", "multitoken", "semformer")


class ObjectiveModel:
    """Shared plumbing: backbone, plan-token handling, greedy generation."""

    kind = "base"
    uses_plan_tokens = False

    def __init__(self, model_config: ModelConfig, vocab: Vocabulary,
                 rng: np.random.Generator, train_prefix: bool = False, k: int = 0):
        self.model_config = model_config
        self.vocab = vocab
        self.train_prefix = train_prefix
        self.k = k if self.uses_plan_tokens else 0
        if vocab.n_plan_tokens != self.k:
            raise ConfigurationError(
                f"{self.kind} objective needs a vocabulary with exactly {self.k} planning "
                f"tokens, got {vocab.n_plan_tokens} (see vocab_for_objective)"
            )
        if model_config.vocab_size != vocab.size:
            raise ConfigurationError(
                f"model vocab_size {model_config.vocab_size} != vocabulary size {vocab.size}"
            )
        self.lm = TransformerLM(model_config, rng)

    # -- parameters ------------------------------------------------------

    def extra_parameters(self) -> list[Parameter]:
        return []

    def parameters(self) -> list[Parameter]:
        return self.lm.parameters() + self.extra_parameters()

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    # -- training --------------------------------------------------------

    def batch(self, samples) -> PlannedBatch:
        return build_planned_batch(samples, self.vocab, self.k,
                                   max_seq_len=self.model_config.max_seq_len,
                                   train_prefix=self.train_prefix)

    def loss(self, samples) -> dict[str, Tensor]:
        raise NotImplementedError

    # -- generation --------------------------------------------------------

    def _context(self, prefixes: np.ndarray, forced: np.ndarray | None) -> np.ndarray:
        parts = [prefixes]
        if self.k:
            plan = np.tile(np.array(self.vocab.plan_ids[:self.k]), (prefixes.shape[0], 1))
            parts.append(plan)
        if forced is not None:
            parts.append(np.asarray(forced, dtype=np.int64))
        return np.concatenate(parts, axis=1)

    def generate(self, prefixes: np.ndarray, max_new: int,
                 forced: np.ndarray | None = None) -> list[list[int]]:
        context = self._context(np.asarray(prefixes, dtype=np.int64), forced)
        return batched_greedy_decode(self.lm, context, max_new, eos_id=self.vocab.eos,
                                     banned_ids=self.vocab.plan_ids)

    def fits(self, prefix_len: int, answer_len: int) -> bool:
        return prefix_len + self.k + answer_len <= self.model_config.max_seq_len


class StandardObjective(ObjectiveModel):
    """Plain teacher-forced next-token prediction on answer targets."""

    kind = "standard"

    def loss(self, samples):
        term, _ = lm_loss_from_batch(self.lm, self.batch(samples))
        return {"total": term, "lm": term}


class PauseObjective(ObjectiveModel):
    """Planning tokens inserted, learned only through the masked LM loss."""

    kind = "pause"
    uses_plan_tokens = True

    def loss(self, samples):
        term, _ = lm_loss_from_batch(self.lm, self.batch(samples))
        return {"total": term, "lm": term}


class BowObjective(ObjectiveModel):
    """Pause plus a bag-of-words head on the mean-pooled planning states.

    The head is a linear map over the node vocabulary; targets are the set
    of node values occurring in the answer, scored with multi-label BCE and
    scaled by ``bow_coeff``.
    """

    kind = "bow"
    uses_plan_tokens = True

    def __init__(self, model_config, vocab, rng, train_prefix=False, k=4, bow_coeff=0.1):
        super().__init__(model_config, vocab, rng, train_prefix, k)
        self.bow_coeff = float(bow_coeff)
        d, n_nodes = model_config.d_model, vocab.value_range_n
        dt = model_config.np_dtype
        self.bow_w = Parameter(rng.normal(0, 0.02, size=(d, n_nodes)).astype(dt), name="bow.head.w")
        self.bow_b = Parameter(np.zeros(n_nodes, dt), name="bow.head.b")

    def extra_parameters(self):
        return [self.bow_w, self.bow_b]

    def bow_targets(self, answers: np.ndarray) -> np.ndarray:
        multi_hot = np.zeros((answers.shape[0], self.vocab.value_range_n))
        for i, row in enumerate(answers):
            for t in row:
                if t < self.vocab.value_range_n:
                    multi_hot[i, t] = 1.0
        return multi_hot

    def loss(self, samples):
        batch = self.batch(samples)
        lm_term, hidden = lm_loss_from_batch(self.lm, batch)
        pooled = hidden[:, batch.plan_positions].mean(axis=1)  # [B, d]
        logits = pooled @ self.bow_w + self.bow_b
        bow_term = T.binary_cross_entropy_with_logits(logits, self.bow_targets(batch.answers))
        total = lm_term + self.bow_coeff * bow_term
        return {"total": total, "lm": lm_term, "bow": bow_term}


class TeacherlessObjective(ObjectiveModel):
    """Non-autoregressive block prediction from repeated placeholder inputs.

    The input is the prefix followed by one learned placeholder id (PAD) per
    answer slot; position t of the block predicts answer token t, and no
    reference answer token is ever part of the input. Inference emits the
    whole block in a single forward pass.
    """

    kind = "teacherless"

    def block_inputs(self, prefixes: np.ndarray, block_len: int,
                     forced: np.ndarray | None = None) -> np.ndarray:
        b = prefixes.shape[0]
        pad_block = np.full((b, block_len), self.vocab.pad, dtype=np.int64)
        if forced is not None:
            pad_block[:, :forced.shape[1]] = forced
        return np.concatenate([prefixes, pad_block], axis=1)

    def loss(self, samples):
        prefixes = np.array([s.prefix_tokens for s in samples], dtype=np.int64)
        answers = np.array([s.answer_tokens for s in samples], dtype=np.int64)
        b, t_ans = answers.shape
        n = prefixes.shape[1]
        tokens = self.block_inputs(prefixes, t_ans)
        hidden = self.lm.forward(tokens).hidden
        # position n-1+t predicts answer token t
        logits = self.lm.logits_from_hidden(hidden[:, n - 1:n + t_ans - 1])
        v = logits.shape[-1]
        term = T.cross_entropy_masked(
            logits.reshape(b * t_ans, v), answers.reshape(-1),
            np.ones(b * t_ans, dtype=bool),
        )
        return {"total": term, "lm": term}

    def generate(self, prefixes, max_new, forced=None):
        prefixes = np.asarray(prefixes, dtype=np.int64)
        n = prefixes.shape[1]
        n_forced = 0 if forced is None else forced.shape[1]
        tokens = self.block_inputs(prefixes, n_forced + max_new, forced)
        hidden = self.lm.forward(tokens).hidden
        start = n + n_forced - 1
        logits = self.lm.logits_from_hidden(hidden[:, start:start + max_new]).data
        logits[:, :, self.vocab.plan_ids] = -np.inf
        block = logits.argmax(axis=-1)
        return [[int(t) for t in row] for row in block]


class MultiTokenObjective(ObjectiveModel):
    """One output head per future offset; inference uses only head 1.

    Head 1 is the ordinary (tied) LM head; offsets 2..n_future_heads add
    linear heads on the final hidden state. Per-head NLLs are averaged by
    default (``head_loss_reduction="sum"`` switches to a sum).
    """

    kind = "multitoken"

    def __init__(self, model_config, vocab, rng, train_prefix=False,
                 n_future_heads=3, head_loss_reduction="mean"):
        super().__init__(model_config, vocab, rng, train_prefix)
        if n_future_heads < 1:
            raise ConfigurationError("n_future_heads must be >= 1")
        if head_loss_reduction not in ("mean", "sum"):
            raise ConfigurationError("head_loss_reduction must be 'mean' or 'sum'")
        self.n_future_heads = int(n_future_heads)
        self.head_loss_reduction = head_loss_reduction
        d, v = model_config.d_model, model_config.vocab_size
        dt = model_config.np_dtype
        self.heads = []
        for h in range(2, self.n_future_heads + 1):
            w = Parameter(rng.normal(0, 0.02, size=(d, v)).astype(dt), name=f"multi.head{h}.w")
            b = Parameter(np.zeros(v, dt), name=f"multi.head{h}.b")
            self.heads.append((w, b))

    def extra_parameters(self):
        return [p for pair in self.heads for p in pair]

    def loss(self, samples):
        batch = self.batch(samples)
        tokens = batch.tokens
        b, length = tokens.shape
        hidden = self.lm.forward(tokens).hidden
        terms = []
        for h in range(1, self.n_future_heads + 1):
            if h == 1:
                logits = self.lm.logits_from_hidden(hidden[:, :length - 1])
            else:
                w, bias = self.heads[h - 2]
                logits = hidden[:, :length - h] @ w + bias
            targets = tokens[:, h:]
            mask = batch.train_mask[:, h:]
            v = logits.shape[-1]
            rows = b * (length - h)
            terms.append(T.cross_entropy_masked(
                logits.reshape(rows, v), targets.reshape(-1), mask.reshape(-1)))
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        if self.head_loss_reduction == "mean":
            total = total * (1.0 / self.n_future_heads)
        return {"total": total, "lm": terms[0]}


class SemformerObjective(ObjectiveModel):
    """Planning tokens plus latent-plan regression against the autoencoder."""

    kind = "semformer"
    uses_plan_tokens = True

    def __init__(self, model_config, vocab, rng, train_prefix=False,
                 sem_config: SemformerConfig | None = None,
                 dec_max_seq_len: int | None = None):
        sem_config = sem_config or SemformerConfig()
        super().__init__(model_config, vocab, rng, train_prefix, k=sem_config.k)
        self.sem_config = sem_config
        dec_len = dec_max_seq_len if dec_max_seq_len is not None else model_config.max_seq_len
        self.modules = SemformerModules(model_config, sem_config, dec_len, rng)

    def extra_parameters(self):
        return self.modules.parameters()

    def loss(self, samples):
        losses = semformer_loss(self.batch(samples), self.lm, self.modules)
        return {"total": losses.total, "lm": losses.lm, "ae": losses.ae, "rp": losses.rp}


_CLASSES = {
    "standard": StandardObjective,
    "pause": PauseObjective,
    "bow": BowObjective,
    "teacherless": TeacherlessObjective,
    "multitoken": MultiTokenObjective,
    "semformer": SemformerObjective,
}


def objective_uses_plan_tokens(kind: str) -> bool:
    if kind not in _CLASSES:
        raise ConfigurationError(f"unknown objective {kind!r}")
    return _CLASSES[kind].uses_plan_tokens


def vocab_for_objective(kind: str, value_range_n: int, k: int = 4) -> Vocabulary:
    """The vocabulary an objective's model trains with.

    Plan-token objectives reserve exactly k trailing embedding rows; the
    others reserve none, so e.g. pause differs from standard by k rows.
    Node and special ids are identical either way.
    """
    return Vocabulary(value_range_n, k if objective_uses_plan_tokens(kind) else 0)


def make_objective(kind: str, model_config: ModelConfig, vocab: Vocabulary,
                   rng: np.random.Generator, *, train_prefix: bool = False,
                   k: int = 4, bow_coeff: float = 0.1, n_future_heads: int = 3,
                   head_loss_reduction: str = "mean",
                   sem_config: SemformerConfig | None = None,
                   dec_max_seq_len: int | None = None) -> ObjectiveModel:
    """Build the objective named by ``kind`` with its per-kind settings."""
    if kind not in _CLASSES:
        raise ConfigurationError(
            f"unknown objective {kind!r}; expected one of {', '.join(OBJECTIVE_KINDS)}"
        )
    if kind in ("standard", "teacherless"):
        return _CLASSES[kind](model_config, vocab, rng, train_prefix)
    if kind == "pause":
        return PauseObjective(model_config, vocab, rng, train_prefix, k=k)
    if kind == "bow":
        return BowObjective(model_config, vocab, rng, train_prefix, k=k, bow_coeff=bow_coeff)
    if kind == "multitoken":
        return MultiTokenObjective(model_config, vocab, rng, train_prefix,
                                   n_future_heads=n_future_heads,
                                   head_loss_reduction=head_loss_reduction)
    return SemformerObjective(model_config, vocab, rng, train_prefix,
                              sem_config=sem_config, dec_max_seq_len=dec_max_seq_len)
