"""Latent-plan training objective.

The language model's input gains ``k`` trainable planning tokens between
prefix and answer; those positions are excluded from the next-token loss.
An autoencoder (encoder shared with the LM by default) compresses the answer
into ``k`` low-dimensional latent vectors via cross-attention pooling and a
linear bottleneck, and a compact causal decoder reconstructs the answer from
the up-projected latents. A shared linear predictor maps the LM's hidden
state at each planning position to the corresponding latent; the training
loss is

    total = lm + ae + alpha * rp

where ``rp`` is the summed squared distance between predicted and target
latents (per sample, averaged over the batch). Generation never touches the
autoencoder or predictor: planning tokens are appended to the prefix and
decoding stays ordinary autoregressive argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import (
    ConfigurationError,
    DegenerateInputError,
    LengthError,
    NonFiniteError,
)
from .pathstar import Vocabulary
from .tensor import Parameter, Tensor
from .transformer import ModelConfig, TransformerLM, cross_attention_pool, parameter_count


@dataclass
class SemformerConfig:
    k: int = 4
    latent_dim: int = 32
    alpha: float = 1.0
    dec_layers: int = 2
    share_encoder: bool = True
    stop_grad_encoder: bool = False
    rp_target_stop_grad: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.latent_dim < 1:
            raise ConfigurationError(f"latent_dim must be >= 1, got {self.latent_dim}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")

    def to_dict(self) -> dict:
        return {"k": self.k, "latent_dim": self.latent_dim, "alpha": self.alpha,
                "dec_layers": self.dec_layers, "share_encoder": self.share_encoder,
                "stop_grad_encoder": self.stop_grad_encoder,
                "rp_target_stop_grad": self.rp_target_stop_grad}


@dataclass
class PlannedSequence:
    """One serialized training example with planning tokens inserted.

    ``lm_loss_mask`` is aligned to *targets*: entry t says whether token t may
    be scored as the next-token target of position t-1. Entry 0 is always
    False (nothing predicts the first token); the only other False entries
    are the planning-token positions, realizing the masked LM loss.
    """

    tokens: np.ndarray
    n: int
    lm_loss_mask: np.ndarray
    plan_positions: np.ndarray

    @property
    def answer_start_pos(self) -> int:
        return self.n + len(self.plan_positions)


def build_planned_sequence(prefix, answer, k: int, vocab: Vocabulary,
                           max_seq_len: int | None = None) -> PlannedSequence:
    """Insert ``k`` planning tokens between prefix and answer.

    With k=0 this degenerates to the plain next-token sequence. The token
    right after the last planning token is the first answer token, so
    next-token targets shift across the insertion without gaps.
    """
    prefix = list(prefix)
    answer = list(answer)
    if not prefix or not answer:
        raise DegenerateInputError("prefix and answer must be nonempty")
    if k > vocab.n_plan_tokens:
        raise ConfigurationError(
            f"k={k} exceeds the {vocab.n_plan_tokens} reserved planning tokens"
        )
    plan_ids = vocab.plan_ids[:k]
    tokens = np.array(prefix + plan_ids + answer, dtype=np.int64)
    if max_seq_len is not None and len(tokens) > max_seq_len:
        raise LengthError(f"planned sequence length {len(tokens)} exceeds {max_seq_len}")
    n = len(prefix)
    mask = np.ones(len(tokens), dtype=bool)
    mask[0] = False
    plan_positions = np.arange(n, n + k)
    mask[plan_positions] = False
    return PlannedSequence(tokens=tokens, n=n, lm_loss_mask=mask,
                           plan_positions=plan_positions)


@dataclass
class PlannedBatch:
    """A stack of equal-shape planned sequences plus the loss mask in use."""

    tokens: np.ndarray        # [B, L]
    train_mask: np.ndarray    # [B, L], targets actually scored by the LM loss
    plan_positions: np.ndarray
    n: int
    answers: np.ndarray       # [B, T_ans]


def build_planned_batch(samples, vocab: Vocabulary, k: int,
                        max_seq_len: int | None = None,
                        train_prefix: bool = False) -> PlannedBatch:
    """Stack samples of identical shape; by default only answer targets train."""
    seqs = [build_planned_sequence(s.prefix_tokens, s.answer_tokens, k, vocab, max_seq_len)
            for s in samples]
    n = seqs[0].n
    tokens = np.stack([s.tokens for s in seqs])
    mask = np.stack([s.lm_loss_mask for s in seqs])
    if not train_prefix:
        region = np.zeros(tokens.shape[1], dtype=bool)
        region[n + k:] = True
        mask = mask & region
    answers = np.array([s.answer_tokens for s in samples], dtype=np.int64)
    return PlannedBatch(tokens=tokens, train_mask=mask,
                        plan_positions=seqs[0].plan_positions, n=n, answers=answers)


class SemformerModules:
    """Trainable pieces beyond the language model itself.

    latent query [k, d_model], bottleneck down-projection, one distinct
    up-projection per latent, the shared latent predictor, the compact
    reconstruction decoder, and (when the encoder is not shared with the LM)
    a separate encoder stack.
    """

    def __init__(self, model_config: ModelConfig, sem_config: SemformerConfig,
                 dec_max_seq_len: int, rng: np.random.Generator):
        if sem_config.latent_dim >= model_config.d_model:
            raise ConfigurationError(
                f"latent_dim {sem_config.latent_dim} must be < d_model {model_config.d_model}"
            )
        self.model_config = model_config
        self.config = sem_config
        d, dz, k = model_config.d_model, sem_config.latent_dim, sem_config.k
        dt = model_config.np_dtype
        std = 0.02

        def par(name, shape, scale=std):
            data = rng.normal(0.0, scale, size=shape).astype(dt) if scale else np.zeros(shape, dt)
            return Parameter(data, name=name)

        self.latent_query = par("plan.query", (k, d))
        self.down_w = par("plan.down.w", (d, dz))
        self.down_b = par("plan.down.b", (dz,), scale=0.0)
        self.up_w = [par(f"plan.up{i}.w", (dz, d)) for i in range(k)]
        self.up_b = [par(f"plan.up{i}.b", (d,), scale=0.0) for i in range(k)]
        self.pred_w = par("plan.pred.w", (d, dz))
        self.pred_b = par("plan.pred.b", (dz,), scale=0.0)
        dec_config = ModelConfig(
            n_layers=sem_config.dec_layers, n_heads=model_config.n_heads,
            d_model=d, d_ff=model_config.d_ff, vocab_size=model_config.vocab_size,
            max_seq_len=dec_max_seq_len, dropout=0.0, tie_embeddings=True,
            dtype=model_config.dtype,
        )
        self.decoder = TransformerLM(dec_config, rng, name="ae_dec")
        self.encoder = None
        if not sem_config.share_encoder:
            self.encoder = TransformerLM(model_config, rng, name="ae_enc")

    def parameters(self) -> list[Parameter]:
        out = [self.latent_query, self.down_w, self.down_b]
        for w, b in zip(self.up_w, self.up_b):
            out.extend((w, b))
        out.extend((self.pred_w, self.pred_b))
        out.extend(self.decoder.parameters())
        if self.encoder is not None:
            out.extend(self.encoder.parameters())
        return out


def semformer_parameter_count(model_config: ModelConfig, sem_config: SemformerConfig,
                              dec_max_seq_len: int) -> int:
    """Closed-form count of the additions on top of the shared LM:

    k*d  (latent query) + d*dz + dz  (down-projection)
    + k*(dz*d + d)  (distinct up-projections) + d*dz + dz  (predictor)
    + decoder stack (closed form of ``transformer.parameter_count``)
    + a separate encoder stack when the encoder is not shared.
    """
    d, dz, k = model_config.d_model, sem_config.latent_dim, sem_config.k
    total = k * d + (d * dz + dz) + k * (dz * d + d) + (d * dz + dz)
    dec_config = ModelConfig(
        n_layers=sem_config.dec_layers, n_heads=model_config.n_heads, d_model=d,
        d_ff=model_config.d_ff, vocab_size=model_config.vocab_size,
        max_seq_len=dec_max_seq_len, dtype=model_config.dtype,
    )
    total += parameter_count(dec_config)
    if not sem_config.share_encoder:
        total += parameter_count(model_config)
    return total


# -- forward pieces ------------------------------------------------------------


def encode_response_latents(answers: np.ndarray, lm: TransformerLM,
                            modules: SemformerModules) -> Tensor:
    """Answers [B, T_ans] -> target latents [B, k, latent_dim].

    The encoder (the LM itself when shared) contextualizes the answer tokens;
    a projection-free cross-attention pools them into k rows which the linear
    bottleneck compresses. With ``stop_grad_encoder`` the encoder sees no
    gradient from this branch.
    """
    answers = np.asarray(answers, dtype=np.int64)
    if answers.ndim != 2 or answers.shape[1] == 0:
        raise DegenerateInputError("encoder needs a nonempty answer batch")
    encoder = lm if modules.config.share_encoder else modules.encoder
    h_r = encoder.forward(answers).hidden
    if modules.config.stop_grad_encoder:
        h_r = h_r.detach()
    pooled = cross_attention_pool(modules.latent_query, h_r)  # [B, k, d]
    return pooled @ modules.down_w + modules.down_b


def reconstruct_response(latents: Tensor, answers: np.ndarray,
                         modules: SemformerModules):
    """Teacher-forced reconstruction NLL of the answers given the latents.

    Each latent row is up-projected by its own linear map; the k projected
    vectors occupy the first k decoder positions as memory (no NLL terms),
    and position k-1+i predicts answer token i.

    Returns (loss, logits) with logits [B, T_ans, V].
    """
    answers = np.asarray(answers, dtype=np.int64)
    b, t_ans = answers.shape
    k = modules.config.k
    dec = modules.decoder
    mem_rows = []
    for i in range(k):
        z_i = latents[:, i]  # [B, dz]
        mem_rows.append((z_i @ modules.up_w[i] + modules.up_b[i]).reshape(b, 1, -1))
    mem = T.concat(mem_rows, axis=1)  # [B, k, d]
    mem = mem + T.embedding(dec.pos_emb, np.arange(k))
    ans_in = T.embedding(dec.tok_emb, answers) + T.embedding(dec.pos_emb, np.arange(k, k + t_ans))
    states = T.concat([mem, ans_in], axis=1)
    hidden = dec.forward_states(states, causal=True).hidden
    pred_h = hidden[:, k - 1:k + t_ans - 1]
    logits = dec.logits_from_hidden(pred_h)  # [B, T_ans, V]
    v = logits.shape[-1]
    loss = T.cross_entropy_masked(
        logits.reshape(b * t_ans, v), answers.reshape(-1), np.ones(b * t_ans, dtype=bool)
    )
    return loss, logits


def predict_latents(lm_hidden: Tensor, plan_positions: np.ndarray,
                    modules: SemformerModules) -> Tensor:
    """Apply the shared predictor to the LM states at the planning positions."""
    h_plan = lm_hidden[:, np.asarray(plan_positions)]  # [B, k, d]
    return h_plan @ modules.pred_w + modules.pred_b


@dataclass
class SemformerLosses:
    lm: Tensor
    ae: Tensor
    rp: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {"lm": self.lm.item(), "ae": self.ae.item(),
                "rp": self.rp.item(), "total": self.total.item()}


def lm_loss_from_batch(lm: TransformerLM, batch: PlannedBatch):
    """Masked next-token loss over a planned batch; returns (loss, hidden)."""
    out = lm.forward(batch.tokens)
    logits = lm.logits_from_hidden(out.hidden)  # [B, L, V]
    b, length, v = logits.shape
    shifted = logits[:, :length - 1]
    targets = batch.tokens[:, 1:]
    mask = batch.train_mask[:, 1:]
    loss = T.cross_entropy_masked(
        shifted.reshape(b * (length - 1), v), targets.reshape(-1), mask.reshape(-1)
    )
    return loss, out.hidden


def semformer_loss(batch: PlannedBatch, lm: TransformerLM,
                   modules: SemformerModules) -> SemformerLosses:
    """All three loss terms in one forward family; total = lm + ae + alpha*rp."""
    config = modules.config
    lm_term, hidden = lm_loss_from_batch(lm, batch)
    z_target = encode_response_latents(batch.answers, lm, modules)
    ae_term, _ = reconstruct_response(z_target, batch.answers, modules)
    z_pred = predict_latents(hidden, batch.plan_positions, modules)
    rp_ref = z_target.detach() if config.rp_target_stop_grad else z_target
    diff = z_pred - rp_ref
    rp_term = (diff * diff).sum() / float(batch.tokens.shape[0])
    total = lm_term + ae_term + config.alpha * rp_term
    losses = SemformerLosses(lm=lm_term, ae=ae_term, rp=rp_term, total=total)
    for name in ("lm", "ae", "rp", "total"):
        if not np.isfinite(getattr(losses, name).data).all():
            raise NonFiniteError(f"loss term {name!r} is not finite")
    return losses


def reconstruction_accuracy(lm: TransformerLM, modules: SemformerModules,
                            answers: np.ndarray) -> float:
    """Teacher-forced token accuracy of the autoencoder on ``answers``."""
    z = encode_response_latents(answers, lm, modules)
    _, logits = reconstruct_response(z, answers, modules)
    pred = logits.data.argmax(axis=-1)
    return float((pred == answers).mean())
