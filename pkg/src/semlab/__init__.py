"""semlab: a desk-scale lab for latent-plan language modeling on path-star graphs."""

from .estimator import SequencePlanner
from .objectives import make_objective, vocab_for_objective
from .pathstar import (
    Vocabulary,
    build_dataset,
    evaluate_model,
    generate_graph,
    load_samples,
    load_vocab,
    serialize_sample,
)
from .semformer import SemformerConfig, build_planned_sequence, semformer_loss
from .tensor import Parameter, Tensor
from .training import RunConfig, Trainer
from .transformer import ModelConfig, TransformerLM, greedy_decode

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "Parameter", "RunConfig", "SemformerConfig", "SequencePlanner",
    "Tensor", "Trainer", "TransformerLM", "Vocabulary", "build_dataset",
    "build_planned_sequence", "evaluate_model", "generate_graph", "greedy_decode",
    "load_samples", "load_vocab", "make_objective", "semformer_loss",
    "serialize_sample", "vocab_for_objective",
]
