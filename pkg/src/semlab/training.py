"""Training loop with checkpointing, metrics streaming, and exact resume.

All randomness flows from ``RunConfig.seed`` through purpose-keyed streams
(weight init, per-epoch shuffles), so a run is reproducible bit-for-bit and
can resume from any checkpoint without drift: the epoch permutation is
re-derived statelessly from (seed, epoch) rather than carried in RNG state.

The metrics stream is append-only JSONL, one record per eval point, never
rewritten in place. Checkpoints are written at every eval point.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ArtifactMismatchError, ConfigurationError
from .objectives import make_objective, objective_uses_plan_tokens, vocab_for_objective
from .optim import AdamW, clip_global_norm
from .pathstar import (
    EvalReport,
    GraphSample,
    Vocabulary,
    evaluate_model,
    load_samples,
    load_vocab,
)
from .rng import derive_rng, generator_state
from .semformer import SemformerConfig
from .transformer import ModelConfig

METRICS_FIELDS = ("step", "epoch", "split", "lm", "ae", "rp", "total",
                  "exact_match", "first_node_acc", "continuation_acc", "wall_time")


@dataclass
class RunConfig:
    """Everything a run needs; serialized into every artifact it produces."""

    data_dir: str = ""
    objective: str = "semformer"
    # model
    n_layers: int = 6
    n_heads: int = 8
    d_model: int = 256
    d_ff: int = 1024
    max_seq_len: int = 0          # 0 = computed from the dataset
    dropout: float = 0.0
    dtype: str = "float32"
    # objective settings
    k: int = 4
    latent_dim: int = 32
    alpha: float = 1.0
    dec_layers: int = 2
    share_encoder: bool = True
    stop_grad_encoder: bool = False
    rp_target_stop_grad: bool = False
    bow_coeff: float = 0.1
    n_future_heads: int = 3
    head_loss_reduction: str = "mean"
    train_prefix: bool = False
    # optimizer
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 200
    clip_norm: float = 1.0
    # loop
    batch_size: int = 32
    max_epochs: int = 10
    eval_every_steps: int = 0     # 0 = evaluate at epoch boundaries only
    eval_subset: int = 500        # 0 = full test set at every eval point
    stop_threshold: float = 0.999
    seed: int = 0
    out_dir: str = ""
    dataset_hash: str = ""        # filled from the dataset manifest

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()
        ).hexdigest()[:16]


def required_seq_len(samples, k: int) -> int:
    return max(len(s.prefix_tokens) + k + len(s.answer_tokens) for s in samples)


def build_objective_from_config(config: RunConfig, vocab_n: int, rng=None):
    """Construct the objective model a RunConfig describes."""
    k_eff = config.k if objective_uses_plan_tokens(config.objective) else 0
    vocab = vocab_for_objective(config.objective, vocab_n, k=config.k)
    if config.max_seq_len <= 0:
        raise ConfigurationError("max_seq_len must be resolved before building the model")
    model_config = ModelConfig(
        n_layers=config.n_layers, n_heads=config.n_heads, d_model=config.d_model,
        d_ff=config.d_ff, vocab_size=vocab.size, max_seq_len=config.max_seq_len,
        dropout=config.dropout, dtype=config.dtype,
    )
    rng = rng if rng is not None else derive_rng(config.seed, "init")
    sem = SemformerConfig(
        k=config.k, latent_dim=config.latent_dim, alpha=config.alpha,
        dec_layers=config.dec_layers, share_encoder=config.share_encoder,
        stop_grad_encoder=config.stop_grad_encoder,
        rp_target_stop_grad=config.rp_target_stop_grad,
    ) if config.objective == "semformer" else None
    model = make_objective(
        config.objective, model_config, vocab, rng, train_prefix=config.train_prefix,
        k=config.k, bow_coeff=config.bow_coeff, n_future_heads=config.n_future_heads,
        head_loss_reduction=config.head_loss_reduction, sem_config=sem,
        dec_max_seq_len=config.max_seq_len if config.objective == "semformer" else None,
    )
    return model, vocab


class Trainer:
    """Drives one run directory: one lock, one metrics stream, checkpoints."""

    def __init__(self, config: RunConfig, train_samples: list[GraphSample] | None = None,
                 test_samples: list[GraphSample] | None = None,
                 vocab: Vocabulary | None = None):
        self.config = config
        if train_samples is None:
            data_dir = Path(config.data_dir)
            manifest = json.loads((data_dir / "manifest.json").read_text())
            config.dataset_hash = manifest["config_hash"]
            train_samples = load_samples(data_dir / manifest["files"]["train"])
            test_samples = load_samples(data_dir / manifest["files"]["test"])
            vocab = load_vocab(data_dir)
        self.train_samples = train_samples
        self.test_samples = test_samples or []
        if config.max_seq_len <= 0:
            need = required_seq_len(self.train_samples, config.k)
            config.max_seq_len = need
        self.model, self.vocab = build_objective_from_config(config, vocab.value_range_n)
        trainable = [p for p in self.model.parameters() if p.trainable]
        self.optimizer = AdamW(trainable, lr=config.lr, betas=(config.beta1, config.beta2),
                               eps=config.eps, weight_decay=config.weight_decay,
                               warmup_steps=config.warmup_steps)
        self.rng = derive_rng(config.seed, "trainer")
        self.step = 0
        self.epoch = 0
        self.pos_in_epoch = 0
        self.records: list[dict] = []
        self._loss_sums: dict[str, float] = {}
        self._loss_count = 0
        self._t0 = time.time()
        self.out_dir = Path(config.out_dir) if config.out_dir else None
        self._lock_acquired = False

    # -- artifacts ---------------------------------------------------------

    def _acquire_lock(self):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        lock = self.out_dir / ".lock"
        if lock.exists():
            raise ConfigurationError(
                f"run directory {self.out_dir} is locked by another training process"
            )
        lock.write_text(str(os.getpid()))
        self._lock_acquired = True
        (self.out_dir / "run_config.json").write_text(
            json.dumps({"config": self.config.to_dict(),
                        "config_hash": self.config.config_hash()}, indent=1))
        metrics = self.out_dir / "metrics.jsonl"
        if not metrics.exists():  # header record makes the stream self-describing
            with metrics.open("a") as f:
                f.write(json.dumps({"run_config": self.config.to_dict(),
                                    "config_hash": self.config.config_hash()}) + "\n")

    def _release_lock(self):
        if self.out_dir is not None and self._lock_acquired:
            lock = self.out_dir / ".lock"
            if lock.exists():
                lock.unlink()
            self._lock_acquired = False

    def _append_metrics(self, record: dict):
        self.records.append(record)
        if self.out_dir is not None:
            with (self.out_dir / "metrics.jsonl").open("a") as f:
                f.write(json.dumps(record) + "\n")

    def _save_checkpoint(self):
        if self.out_dir is None:
            return None
        path = self.out_dir / "checkpoints" / f"step_{self.step:08d}.ckpt"
        counters = {"step": self.step, "epoch": self.epoch,
                    "pos_in_epoch": self.pos_in_epoch}
        run_config = {"config": self.config.to_dict(),
                      "config_hash": self.config.config_hash(),
                      "vocab": self.vocab.to_dict()}
        save_checkpoint(path, self.model.parameters(), self.optimizer, run_config,
                        counters, rng_state=generator_state(self.rng))
        (self.out_dir / "checkpoints" / "latest.txt").write_text(path.name)
        return path

    # -- core loop -----------------------------------------------------------

    def _epoch_order(self, epoch: int) -> np.ndarray:
        return derive_rng(self.config.seed, "perm", epoch).permutation(len(self.train_samples))

    def train_step(self, samples: list[GraphSample]) -> dict[str, float]:
        self.optimizer.zero_grad()
        losses = self.model.loss(samples)
        losses["total"].backward()
        if self.config.clip_norm > 0:
            clip_global_norm(self.optimizer.params, self.config.clip_norm)
        self.optimizer.step()
        self.step += 1
        out = {name: t.item() for name, t in losses.items()}
        for name, value in out.items():
            self._loss_sums[name] = self._loss_sums.get(name, 0.0) + value
        self._loss_count += 1
        return out

    def _mean_losses(self) -> dict[str, float]:
        if self._loss_count == 0:
            return {}
        means = {k: v / self._loss_count for k, v in self._loss_sums.items()}
        self._loss_sums = {}
        self._loss_count = 0
        return means

    def evaluate(self, subset: int | None = None, with_continuation: bool = True) -> EvalReport:
        samples = self.test_samples
        if subset and subset < len(samples):
            samples = samples[:subset]
        return evaluate_model(self.model, samples, with_continuation=with_continuation)

    def _eval_point(self) -> dict:
        report = self.evaluate(subset=self.config.eval_subset or None)
        means = self._mean_losses()
        record = {
            "step": self.step, "epoch": self.epoch, "split": "test",
            "lm": means.get("lm"), "ae": means.get("ae"), "rp": means.get("rp"),
            "total": means.get("total"),
            "exact_match": report.exact_match,
            "first_node_acc": report.first_node_acc,
            "continuation_acc": report.continuation_acc,
            "wall_time": time.time() - self._t0,
        }
        self._append_metrics(record)
        self._save_checkpoint()
        return record

    def train(self, log=None) -> dict:
        """Run to max_epochs or early stop; returns a summary dict."""
        self._acquire_lock()
        best = {"exact_match": -1.0, "step": 0}
        stopped = False
        try:
            while self.epoch < self.config.max_epochs and not stopped:
                order = self._epoch_order(self.epoch)
                n = len(order)
                while self.pos_in_epoch < n:
                    lo = self.pos_in_epoch
                    hi = min(lo + self.config.batch_size, n)
                    batch = [self.train_samples[i] for i in order[lo:hi]]
                    self.train_step(batch)
                    self.pos_in_epoch = hi
                    if (self.config.eval_every_steps
                            and self.step % self.config.eval_every_steps == 0
                            and self.pos_in_epoch < n):
                        record = self._eval_point()
                        if log:
                            log(record)
                        if record["exact_match"] > best["exact_match"]:
                            best = {"exact_match": record["exact_match"], "step": self.step}
                        if record["exact_match"] >= self.config.stop_threshold:
                            stopped = True
                            break
                if stopped:
                    break
                self.epoch += 1
                self.pos_in_epoch = 0
                record = self._eval_point()
                if log:
                    log(record)
                if record["exact_match"] > best["exact_match"]:
                    best = {"exact_match": record["exact_match"], "step": self.step}
                if record["exact_match"] >= self.config.stop_threshold:
                    stopped = True
            final = self.evaluate(subset=None)
            final_record = {
                "step": self.step, "epoch": self.epoch, "split": "test_full",
                "lm": None, "ae": None, "rp": None, "total": None,
                "exact_match": final.exact_match,
                "first_node_acc": final.first_node_acc,
                "continuation_acc": final.continuation_acc,
                "wall_time": time.time() - self._t0,
            }
            self._append_metrics(final_record)
            if log:
                log(final_record)
            return {"steps": self.step, "epochs": self.epoch,
                    "early_stopped": stopped,
                    "best_test_exact_match": best["exact_match"],
                    "best_step": best["step"],
                    "final": final.to_dict()}
        finally:
            self._release_lock()

    # -- resume -----------------------------------------------------------------

    @classmethod
    def resume(cls, checkpoint_path, data_dir=None, out_dir=None) -> "Trainer":
        """Rebuild a trainer exactly at a checkpoint's eval point."""
        ckpt = load_checkpoint(checkpoint_path)
        config = RunConfig.from_dict(ckpt.run_config["config"])
        if data_dir is not None:
            config.data_dir = str(data_dir)
        if out_dir is not None:
            config.out_dir = str(out_dir)
        trainer = cls(config)
        if ckpt.run_config.get("config_hash") != config.config_hash():
            # data_dir/out_dir overrides legitimately change the hash; anything
            # else is a real mismatch
            stored = RunConfig.from_dict(ckpt.run_config["config"])
            stored.data_dir, stored.out_dir = config.data_dir, config.out_dir
            if stored.config_hash() != config.config_hash():
                raise ArtifactMismatchError("checkpoint config does not match run config")
        ckpt.restore_params(trainer.model.parameters())
        ckpt.restore_optimizer(trainer.optimizer)
        trainer.step = int(ckpt.counters["step"])
        trainer.epoch = int(ckpt.counters["epoch"])
        trainer.pos_in_epoch = int(ckpt.counters.get("pos_in_epoch", 0))
        return trainer


def export_curves_csv(run_dir) -> str:
    """Flatten a run's metrics stream to CSV with the documented header."""
    run_dir = Path(run_dir)
    metrics = run_dir / "metrics.jsonl"
    if not metrics.exists():
        raise ConfigurationError(f"no metrics stream found in {run_dir}")
    lines = [",".join(METRICS_FIELDS)]
    with metrics.open() as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "step" not in rec:
                continue  # header record
            row = []
            for fname in METRICS_FIELDS:
                value = rec.get(fname)
                row.append("" if value is None else str(value))
            lines.append(",".join(row))
    return "\n".join(lines) + "\n"
