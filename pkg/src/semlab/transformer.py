"""Decoder-only Transformer with pre-norm residual blocks.

GPT2-flavoured: learned absolute positions, GELU MLP with d_ff = 4*d_model,
tied input/output embeddings, weights drawn from normal(0, 0.02) with
residual output projections scaled by 1/sqrt(2*n_layers).

Two forward paths share the same weights: a graph-building pass used for
training, and a plain-numpy incremental pass with a KV cache used for
generation (training-free, so it skips the autodiff machinery).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateInputError, DimensionError, LengthError
from .tensor import Parameter, Tensor

INIT_STD = 0.02


@dataclass
class ModelConfig:
    n_layers: int = 6
    n_heads: int = 8
    d_model: int = 256
    d_ff: int = 1024
    vocab_size: int = 32
    max_seq_len: int = 128
    dropout: float = 0.0
    tie_embeddings: bool = True
    dtype: str = "float64"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigurationError(f"dtype must be float64 or float32, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
            "d_ff": self.d_ff, "vocab_size": self.vocab_size, "max_seq_len": self.max_seq_len,
            "dropout": self.dropout, "tie_embeddings": self.tie_embeddings, "dtype": self.dtype,
        }


@dataclass
class EncoderOutputs:
    """Hidden states of a forward pass, optionally with attention weights."""

    hidden: Tensor  # [..., T, d_model]
    attn: np.ndarray | None = None  # [n_layers, n_heads, T, T]


def parameter_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a ``TransformerLM``.

    tok_emb V*d + pos_emb L*d
    + n_layers * (12*d^2 + 13*d)   [qkv/out projections+biases, 2 LayerNorms, MLP]
    + 2*d                          [final LayerNorm]
    + V*d if the output head is untied.
    """
    d, v = config.d_model, config.vocab_size
    per_layer = 4 * (d * d + d) + 2 * (d * config.d_ff) + config.d_ff + d + 4 * d
    total = v * d + config.max_seq_len * d + config.n_layers * per_layer + 2 * d
    if not config.tie_embeddings:
        total += v * d
    return total


class TransformerLM:
    """Causal language model; also reusable as the shared response encoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator, name: str = "lm"):
        self.config = config
        self.name = name
        self._params: dict[str, Parameter] = {}
        dt = config.np_dtype
        d, v, ff = config.d_model, config.vocab_size, config.d_ff

        def par(pname, shape, std=INIT_STD):
            data = rng.normal(0.0, std, size=shape).astype(dt) if std else np.zeros(shape, dt)
            p = Parameter(data, name=f"{name}.{pname}")
            self._params[pname] = p
            return p

        self.tok_emb = par("tok_emb", (v, d))
        self.pos_emb = par("pos_emb", (config.max_seq_len, d))
        resid_std = INIT_STD / math.sqrt(2.0 * config.n_layers)
        self.blocks = []
        for i in range(config.n_layers):
            blk = {
                "ln1_g": par(f"block{i}.ln1.g", (d,), std=0.0),
                "ln1_b": par(f"block{i}.ln1.b", (d,), std=0.0),
                "wq": par(f"block{i}.attn.wq", (d, d)),
                "bq": par(f"block{i}.attn.bq", (d,), std=0.0),
                "wk": par(f"block{i}.attn.wk", (d, d)),
                "bk": par(f"block{i}.attn.bk", (d,), std=0.0),
                "wv": par(f"block{i}.attn.wv", (d, d)),
                "bv": par(f"block{i}.attn.bv", (d,), std=0.0),
                "wo": par(f"block{i}.attn.wo", (d, d), std=resid_std),
                "bo": par(f"block{i}.attn.bo", (d,), std=0.0),
                "ln2_g": par(f"block{i}.ln2.g", (d,), std=0.0),
                "ln2_b": par(f"block{i}.ln2.b", (d,), std=0.0),
                "w1": par(f"block{i}.mlp.w1", (d, ff)),
                "b1": par(f"block{i}.mlp.b1", (ff,), std=0.0),
                "w2": par(f"block{i}.mlp.w2", (ff, d), std=resid_std),
                "b2": par(f"block{i}.mlp.b2", (d,), std=0.0),
            }
            blk["ln1_g"].data[:] = 1.0
            blk["ln2_g"].data[:] = 1.0
            self.blocks.append(blk)
        self.lnf_g = par("lnf.g", (d,), std=0.0)
        self.lnf_b = par("lnf.b", (d,), std=0.0)
        self.lnf_g.data[:] = 1.0
        if not config.tie_embeddings:
            self.lm_head = par("lm_head", (v, d))

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Parameter]:
        return {p.name: p for p in self._params.values()}

    # -- graph-building forward (training) --------------------------------

    def _check_tokens(self, tokens: np.ndarray):
        if tokens.ndim != 2:
            raise DimensionError(f"tokens must be [batch, T], got shape {tokens.shape}")
        if tokens.shape[1] > self.config.max_seq_len:
            raise LengthError(
                f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValueError("token id out of vocabulary range")

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        self._check_tokens(tokens)
        pos = T.embedding(self.pos_emb, np.arange(tokens.shape[1]))
        return T.embedding(self.tok_emb, tokens) + pos

    def _causal_mask(self, t: int) -> Tensor:
        mask = np.triu(np.full((t, t), -np.inf, dtype=self.config.np_dtype), k=1)
        return Tensor(mask)

    def forward_states(self, states: Tensor, causal: bool = True,
                       collect_attention: bool = False) -> EncoderOutputs:
        """Run the block stack on already-embedded inputs ``[B, T, d_model]``."""
        t = states.shape[-2]
        scale = 1.0 / math.sqrt(self.config.head_dim)
        mask = self._causal_mask(t) if causal else None
        attn_maps = [] if collect_attention else None
        h = states
        b = states.shape[0]
        n_heads, head_dim = self.config.n_heads, self.config.head_dim
        for blk in self.blocks:
            x = T.layer_norm(h, blk["ln1_g"], blk["ln1_b"])
            q = T.affine(x, blk["wq"], blk["bq"]).reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
            k = T.affine(x, blk["wk"], blk["bk"]).reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
            v = T.affine(x, blk["wv"], blk["bv"]).reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)
            scores = (q @ k.swapaxes(-1, -2)) * scale
            if mask is not None:
                scores = scores + mask
            att = T.softmax(scores, axis=-1)
            if collect_attention:
                attn_maps.append(att.data.copy())
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, self.config.d_model)
            h = h + T.affine(ctx, blk["wo"], blk["bo"])
            x2 = T.layer_norm(h, blk["ln2_g"], blk["ln2_b"])
            h = h + T.affine(T.gelu(T.affine(x2, blk["w1"], blk["b1"])), blk["w2"], blk["b2"])
        hidden = T.layer_norm(h, self.lnf_g, self.lnf_b)
        attn = np.stack(attn_maps, axis=0) if collect_attention else None  # [L, B, H, T, T]
        return EncoderOutputs(hidden=hidden, attn=attn)

    def forward(self, tokens: np.ndarray, collect_attention: bool = False) -> EncoderOutputs:
        return self.forward_states(self.embed(tokens), causal=True,
                                   collect_attention=collect_attention)

    def logits_from_hidden(self, hidden: Tensor) -> Tensor:
        if self.config.tie_embeddings:
            return hidden @ self.tok_emb.transpose(1, 0)
        return hidden @ self.lm_head.transpose(1, 0)


def lm_forward(model: TransformerLM, tokens, collect_attention: bool = False):
    """Single-sequence convenience wrapper: tokens [T] -> (outputs, logits [T, V])."""
    tokens = np.asarray(tokens, dtype=np.int64).reshape(1, -1)
    out = model.forward(tokens, collect_attention=collect_attention)
    hidden = out.hidden.reshape(tokens.shape[1], model.config.d_model)
    attn = out.attn[:, 0] if out.attn is not None else None  # drop batch dim
    logits = model.logits_from_hidden(hidden)
    return EncoderOutputs(hidden=hidden, attn=attn), logits


def cross_attention_pool(queries: Tensor, memory: Tensor) -> Tensor:
    """Pool memory states into one output row per query.

    ``queries`` [k, d] attend over ``memory`` ([T, d] or [B, T, d]) with no
    causal mask; keys and values are the memory states themselves, so with a
    single memory position every output row equals that position's state.
    """
    if memory.shape[-2] == 0:
        raise DegenerateInputError("cross_attention_pool: empty memory")
    if queries.shape[-1] != memory.shape[-1]:
        raise DimensionError(
            f"query dim {queries.shape} does not match memory dim {memory.shape}"
        )
    scale = 1.0 / math.sqrt(queries.shape[-1])
    scores = (queries @ memory.swapaxes(-1, -2)) * scale
    att = T.softmax(scores, axis=-1)
    return att @ memory


class InferenceSession:
    """Incremental decoding with a per-layer KV cache; no gradients.

    Mirrors ``TransformerLM.forward_states`` op for op on raw numpy arrays.
    """

    def __init__(self, model: TransformerLM, batch_size: int):
        self.model = model
        self.b = batch_size
        cfg = model.config
        self.k_cache = [None] * cfg.n_layers
        self.v_cache = [None] * cfg.n_layers
        self.t = 0

    def _ln(self, x, g, b):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / np.sqrt(var + 1e-5) * g.data + b.data

    def _gelu(self, x):
        return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))

    def feed(self, tokens: np.ndarray) -> np.ndarray:
        """Consume ``tokens`` [B, T_new]; return logits at the last position [B, V]."""
        cfg = self.model.config
        tokens = np.asarray(tokens, dtype=np.int64)
        t_new = tokens.shape[1]
        if self.t + t_new > cfg.max_seq_len:
            raise LengthError(
                f"decode length {self.t + t_new} exceeds max_seq_len {cfg.max_seq_len}"
            )
        m = self.model
        h = m.tok_emb.data[tokens] + m.pos_emb.data[self.t:self.t + t_new]
        scale = 1.0 / math.sqrt(cfg.head_dim)
        nh, hd = cfg.n_heads, cfg.head_dim
        for i, blk in enumerate(m.blocks):
            x = self._ln(h, blk["ln1_g"], blk["ln1_b"])
            q = (x @ blk["wq"].data + blk["bq"].data).reshape(self.b, t_new, nh, hd).transpose(0, 2, 1, 3)
            k = (x @ blk["wk"].data + blk["bk"].data).reshape(self.b, t_new, nh, hd).transpose(0, 2, 1, 3)
            v = (x @ blk["wv"].data + blk["bv"].data).reshape(self.b, t_new, nh, hd).transpose(0, 2, 1, 3)
            if self.k_cache[i] is not None:
                k = np.concatenate([self.k_cache[i], k], axis=2)
                v = np.concatenate([self.v_cache[i], v], axis=2)
            self.k_cache[i], self.v_cache[i] = k, v
            scores = (q @ k.swapaxes(-1, -2)) * scale
            if t_new > 1:
                t_total = k.shape[2]
                mask = np.triu(np.full((t_new, t_total), -np.inf, dtype=scores.dtype),
                               k=1 + (t_total - t_new))
                scores = scores + mask
            shifted = scores - scores.max(axis=-1, keepdims=True)
            e = np.exp(shifted)
            att = e / e.sum(axis=-1, keepdims=True)
            ctx = (att @ v).transpose(0, 2, 1, 3).reshape(self.b, t_new, cfg.d_model)
            h = h + (ctx @ blk["wo"].data + blk["bo"].data)
            x2 = self._ln(h, blk["ln2_g"], blk["ln2_b"])
            h = h + (self._gelu(x2 @ blk["w1"].data + blk["b1"].data) @ blk["w2"].data + blk["b2"].data)
        self.t += t_new
        hidden = self._ln(h[:, -1], m.lnf_g, m.lnf_b)
        head = m.tok_emb.data if cfg.tie_embeddings else m.lm_head.data
        return hidden @ head.T


def greedy_decode(model: TransformerLM, prefix, max_new: int, eos_id: int,
                  banned_ids=()) -> list[int]:
    """Deterministic argmax decoding from a single prefix.

    Returns the generated ids, including the terminating EOS when emitted.
    Ties break toward the lowest token id; ``banned_ids`` logits are removed
    from consideration entirely.
    """
    out = batched_greedy_decode(model, np.asarray(prefix, dtype=np.int64).reshape(1, -1),
                                max_new, eos_id, banned_ids)
    return out[0]


def batched_greedy_decode(model: TransformerLM, prefixes: np.ndarray, max_new: int,
                          eos_id: int, banned_ids=()) -> list[list[int]]:
    """Greedy-decode a batch of equal-length prefixes in one KV-cached sweep."""
    prefixes = np.asarray(prefixes, dtype=np.int64)
    b, t0 = prefixes.shape
    if t0 + max_new > model.config.max_seq_len:
        raise LengthError(
            f"prefix {t0} + max_new {max_new} exceeds max_seq_len {model.config.max_seq_len}"
        )
    session = InferenceSession(model, b)
    logits = session.feed(prefixes)
    generated = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    banned = list(banned_ids)
    for _ in range(max_new):
        if banned:
            logits[:, banned] = -np.inf
        nxt = logits.argmax(axis=1)
        for i in range(b):
            if not done[i]:
                generated[i].append(int(nxt[i]))
                if nxt[i] == eos_id:
                    done[i] = True
        if done.all():
            break
        logits = session.feed(nxt.reshape(b, 1))
    return generated


def export_attention(model: TransformerLM, tokens) -> np.ndarray:
    """Head-averaged attention per layer: [n_layers, T, T], rows convex."""
    outputs, _ = lm_forward(model, tokens, collect_attention=True)
    return outputs.attn.mean(axis=1)


def attention_records(model: TransformerLM, tokens, token_strings: list[str]) -> list[dict]:
    """One serializable record per layer for offline plotting."""
    mats = export_attention(model, tokens)
    return [
        {"layer": i, "tokens": list(token_strings), "matrix": mats[i].tolist()}
        for i in range(mats.shape[0])
    ]
