"""Finite-difference verification of backward passes."""

from __future__ import annotations

import numpy as np

from .tensor import Parameter


def grad_check(f, params: list[Parameter], eps: float = 1e-5,
               n_coords: int = 5, rng: np.random.Generator | None = None) -> float:
    """Compare analytic gradients of ``f()`` against central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor. For a random subset of coordinates of each parameter the central
    difference ``(f(w+eps) - f(w-eps)) / 2eps`` is compared against the
    gradient from one backward pass. Returns the maximum relative error,
    where the denominator is floored at 1e-4 so coordinates with negligible
    gradient cannot dominate through round-off noise.

    Parameters should be float64; float32 round-off swamps the comparison.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    analytic = [None if p.grad is None else p.grad.copy() for p in params]

    worst = 0.0
    for p, a_grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        idx = rng.choice(n, size=min(n_coords, n), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f().item()
            flat[i] = orig - eps
            f_minus = f().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            a = 0.0 if a_grad is None else float(a_grad.reshape(-1)[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-4)
            worst = max(worst, rel)
    return worst
