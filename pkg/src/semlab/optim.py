"""AdamW with decoupled weight decay, linear warmup, and global-norm clipping."""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError
from .tensor import Parameter


class AdamW:
    """Decoupled-weight-decay Adam over a fixed list of named parameters.

    Decay multiplies weights directly (never routed through the moments), and
    both moments are bias-corrected. Learning rate ramps linearly over
    ``warmup_steps`` optimizer steps, then stays constant.
    """

    def __init__(self, params: list[Parameter], lr=3e-4, betas=(0.9, 0.999),
                 eps=1e-8, weight_decay=0.01, warmup_steps=0):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.warmup_steps = int(warmup_steps)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def current_lr(self) -> float:
        """Learning rate that the *next* step() call will use."""
        if self.warmup_steps > 0 and self.step_count < self.warmup_steps:
            return self.lr * (self.step_count + 1) / self.warmup_steps
        return self.lr

    def step(self):
        """Apply one update using each parameter's accumulated ``.grad``."""
        for p in self.params:
            if p.trainable and p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
        lr = self.current_lr()
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            if not p.trainable:
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if self.weight_decay != 0.0:
                p.data *= 1.0 - lr * self.weight_decay
            m, v = self.m[i], self.v[i]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    # -- checkpoint support -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, p in enumerate(self.params):
            out[f"{p.name}.m"] = self.m[i]
            out[f"{p.name}.v"] = self.v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int):
        for i, p in enumerate(self.params):
            self.m[i] = arrays[f"{p.name}.m"].astype(p.data.dtype, copy=True)
            self.v[i] = arrays[f"{p.name}.v"].astype(p.data.dtype, copy=True)
        self.step_count = int(step_count)

    def hyperparams(self) -> dict:
        return {
            "lr": self.lr,
            "betas": [self.beta1, self.beta2],
            "eps": self.eps,
            "weight_decay": self.weight_decay,
            "warmup_steps": self.warmup_steps,
        }


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns the pre-clip norm.
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            flat = p.grad.ravel()
            total += float(np.dot(flat, flat))
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm
