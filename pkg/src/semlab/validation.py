"""Input validation helpers for the estimator API."""

from __future__ import annotations

import numbers

import numpy as np


def check_token_sequences(X, name: str = "X") -> list[list[int]]:
    """Coerce to a list of nonempty int lists; reject anything else."""
    if isinstance(X, np.ndarray):
        if X.ndim != 2:
            raise ValueError(f"{name} array must be 2-d, got shape {X.shape}")
        X = X.tolist()
    if not isinstance(X, (list, tuple)):
        raise TypeError(f"{name} must be a sequence of token id sequences")
    out = []
    for i, seq in enumerate(X):
        if isinstance(seq, np.ndarray):
            seq = seq.tolist()
        if not isinstance(seq, (list, tuple)) or len(seq) == 0:
            raise ValueError(f"{name}[{i}] must be a nonempty token sequence")
        row = []
        for t in seq:
            if isinstance(t, bool) or not isinstance(t, numbers.Integral):
                raise ValueError(f"{name}[{i}] contains a non-integer token: {t!r}")
            if t < 0:
                raise ValueError(f"{name}[{i}] contains a negative token id: {t}")
            row.append(int(t))
        out.append(row)
    if not out:
        raise ValueError(f"{name} must contain at least one sequence")
    return out


def check_X_y(X, y) -> tuple[list[list[int]], list[list[int]]]:
    X = check_token_sequences(X, "X")
    y = check_token_sequences(y, "y")
    if len(X) != len(y):
        raise ValueError(f"X and y disagree in length: {len(X)} vs {len(y)}")
    return X, y


def infer_value_range(y: list[list[int]]) -> int:
    """Recover the node-value range from answers that all end in EOS.

    In this grammar EOS sits at node_range + 4, and every answer ends with
    it, so the trailing token pins the vocabulary.
    """
    eos = y[0][-1]
    for i, row in enumerate(y):
        if row[-1] != eos:
            raise ValueError(
                f"y[{i}] does not end with the same EOS token as y[0] "
                f"({row[-1]} vs {eos}); pass value_range_n explicitly"
            )
    n = eos - 4
    if n < 1:
        raise ValueError(f"inferred value range {n} is not positive")
    return n
