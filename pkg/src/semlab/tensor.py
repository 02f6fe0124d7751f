"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays (float64 by default, float32 switchable per model for
speed). Every differentiable operation records its parents and a backward
closure; ``Tensor.backward()`` walks the graph in reverse topological order
and accumulates gradients into ``.grad``. Graphs are rebuilt from scratch on
every forward pass; nothing is reused across steps.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateInputError, DimensionError

DEFAULT_DTYPE = np.float64

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(DEFAULT_DTYPE)
    return arr


class Tensor:
    """A dense n-dimensional float array, optionally tracked by autodiff."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None, _parents=(), _backward=None):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- introspection ----------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise DimensionError(f"item() requires a scalar tensor, got shape {self.shape}")

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{grad})"

    # -- autodiff ----------------------------------------------------------

    def detach(self) -> "Tensor":
        """A view of the same data with no gradient history."""
        return Tensor(self.data, requires_grad=False)

    def accumulate_grad(self, g: np.ndarray, own: bool = False):
        """Add ``g`` into ``.grad``. ``own=True`` promises ``g`` is a fresh
        writable array that no one else aliases, letting us adopt it."""
        if self.grad is None:
            if own and g.dtype == self.data.dtype:
                self.grad = g
            else:
                self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from this scalar; seeds d(self)/d(self) = 1."""
        if self.data.size != 1:
            raise DimensionError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, key):
        return take(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 or isinstance(shape[0], int) else shape[0])

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)


class Parameter(Tensor):
    """A named, trainable leaf tensor."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.trainable = trainable

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# -- helpers ----------------------------------------------------------------


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data: np.ndarray, parents: tuple, backward) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward)
    return Tensor(data)


# -- elementwise and structural ops ------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a_t, b_t = (a, _coerce(b, a)) if isinstance(a, Tensor) else (_coerce(a, b), b)
    out_data = a_t.data + b_t.data

    def backward(g):
        if a_t.requires_grad:
            a_t.accumulate_grad(_unbroadcast(g, a_t.data.shape))
        if b_t.requires_grad:
            b_t.accumulate_grad(_unbroadcast(g, b_t.data.shape))

    return _make(out_data, (a_t, b_t), backward)


def mul(a: Tensor, b) -> Tensor:
    a_t, b_t = (a, _coerce(b, a)) if isinstance(a, Tensor) else (_coerce(a, b), b)
    out_data = a_t.data * b_t.data

    def backward(g):
        if a_t.requires_grad:
            a_t.accumulate_grad(_unbroadcast(g * b_t.data, a_t.data.shape), own=True)
        if b_t.requires_grad:
            b_t.accumulate_grad(_unbroadcast(g * a_t.data, b_t.data.shape), own=True)

    return _make(out_data, (a_t, b_t), backward)


def power(x: Tensor, p: float) -> Tensor:
    out_data = x.data ** p

    def backward(g):
        x.accumulate_grad(g * p * x.data ** (p - 1.0), own=True)

    return _make(out_data, (x,), backward)


def texp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        x.accumulate_grad(g * out_data, own=True)

    return _make(out_data, (x,), backward)


def tlog(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def backward(g):
        x.accumulate_grad(g / x.data, own=True)

    return _make(out_data, (x,), backward)


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def backward(g):
        x.accumulate_grad(g * (1.0 - out_data * out_data), own=True)

    return _make(out_data, (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    out_data = x.data.reshape(shape)

    def backward(g):
        x.accumulate_grad(g.reshape(x.data.shape))

    return _make(out_data, (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    out_data = np.transpose(x.data, axes)
    inv = np.argsort(axes) if axes is not None else None

    def backward(g):
        x.accumulate_grad(np.transpose(g, inv))

    return _make(out_data, (x,), backward)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    out_data = np.swapaxes(x.data, a, b)

    def backward(g):
        x.accumulate_grad(np.swapaxes(g, a, b))

    return _make(out_data, (x,), backward)


def _is_basic_index(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(p, (slice, int)) or p is Ellipsis for p in parts)


def take(x: Tensor, key) -> Tensor:
    out_data = x.data[key]
    basic = _is_basic_index(key)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:  # non-overlapping, so plain assignment is exact and fast
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        x.accumulate_grad(gx, own=True)

    return _make(out_data, (x,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offset, offset + size)
            if t.requires_grad:
                t.accumulate_grad(g[tuple(sl)])
            offset += size

    return _make(out_data, tuple(tensors), backward)


def tsum(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out_data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        x.accumulate_grad(np.broadcast_to(g, x.data.shape).astype(x.data.dtype, copy=False))

    return _make(out_data, (x,), backward)


def tmean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod(
        [x.data.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))]
    )
    return mul(tsum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports stacked (batched) operands with broadcasting.

    The common (..., m, k) @ (k, n) case is folded into one 2-d GEMM in both
    passes, which is much faster than numpy's per-batch loop.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul requires >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        k, n = b.shape
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, k)
        out_data = (a2 @ b.data).reshape(*lead, n)

        def backward(g):
            g2 = np.ascontiguousarray(g).reshape(-1, n)
            if a.requires_grad:
                a.accumulate_grad((g2 @ b.data.T).reshape(a.data.shape), own=True)
            if b.requires_grad:
                b.accumulate_grad(a2.T @ g2, own=True)

        return _make(out_data, (a, b), backward)

    out_data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    return _make(out_data, (a, b), backward)


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """``x @ w + b`` fused into one node; single 2-d GEMM per pass."""
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine inner dimensions disagree: {x.shape} @ {w.shape}")
    k, n = w.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, k)
    out_data = (x2 @ w.data + b.data).reshape(*lead, n)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, n)
        if x.requires_grad:
            x.accumulate_grad((g2 @ w.data.T).reshape(x.data.shape), own=True)
        if w.requires_grad:
            w.accumulate_grad(x2.T @ g2, own=True)
        if b.requires_grad:
            b.accumulate_grad(g2.sum(axis=0), own=True)

    return _make(out_data, (x, w, b), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup into an embedding table; backward scatter-adds."""
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
        table.accumulate_grad(gt, own=True)

    return _make(out_data, (table,), backward)


# -- fused neural-net ops ------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        x.accumulate_grad(out_data * (g - dot), own=True)

    return _make(out_data, (x,), backward)


def gelu(x: Tensor) -> Tensor:
    """GELU with the usual tanh approximation."""
    xd = x.data
    sq = xd * xd
    t = np.tanh(_GELU_C * (xd + _GELU_A * (sq * xd)))
    out_data = 0.5 * xd * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + (3.0 * _GELU_A) * sq)
        dx = 0.5 * (1.0 + t) + (0.5 * xd) * ((1.0 - t * t) * du)
        x.accumulate_grad(g * dx, own=True)

    return _make(out_data, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            red = tuple(range(g.ndim - 1))
            gain.accumulate_grad((g * xhat).sum(axis=red), own=True)
            bias.accumulate_grad(g.sum(axis=red), own=True)
        if x.requires_grad:
            dxhat = g * gain.data
            s1 = dxhat.sum(axis=-1, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=-1, keepdims=True)
            x.accumulate_grad((dxhat - s1 / d - xhat * s2 / d) * inv, own=True)

    return _make(out_data, (x, gain, bias), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def cross_entropy_masked(logits: Tensor, targets, mask) -> Tensor:
    """Mean negative log-likelihood over unmasked rows.

    ``logits`` is [N, V]; ``targets`` int ids in [0, V); ``mask`` marks rows
    that contribute. Target values at masked rows never affect the result.
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask_arr = np.asarray(mask, dtype=bool)
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, V], got {logits.shape}")
    n, v = logits.shape
    if targets.shape != (n,) or mask_arr.shape != (n,):
        raise DimensionError(
            f"targets/mask must have shape ({n},), got {targets.shape} and {mask_arr.shape}"
        )
    if targets.min(initial=0) < 0 or targets.max(initial=0) >= v:
        raise ValueError("target ids out of vocabulary range")
    n_active = int(mask_arr.sum())
    if n_active == 0:
        raise DegenerateInputError("all positions are masked; loss undefined")

    m = logits.data.max(axis=1, keepdims=True)
    e = np.exp(logits.data - m)
    z = e.sum(axis=1, keepdims=True)
    log_probs = logits.data - m - np.log(z)
    picked = log_probs[np.arange(n), targets]
    loss = -(picked * mask_arr).sum() / n_active
    out_data = np.asarray(loss, dtype=logits.data.dtype)

    def backward(g):
        probs = e / z
        probs[np.arange(n), targets] -= 1.0
        probs *= (mask_arr / n_active)[:, None]
        logits.accumulate_grad(g * probs, own=True)

    return _make(out_data, (logits,), backward)


def binary_cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean multi-label BCE; ``targets`` is a 0/1 array of logits' shape."""
    y = np.asarray(targets, dtype=logits.data.dtype)
    if y.shape != logits.shape:
        raise DimensionError(f"targets shape {y.shape} != logits shape {logits.shape}")
    x = logits.data
    # stable: max(x,0) - x*y + log(1 + exp(-|x|))
    per = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    out_data = np.asarray(per.mean(), dtype=x.dtype)
    n = x.size

    def backward(g):
        sig = 1.0 / (1.0 + np.exp(-x))
        logits.accumulate_grad(g * (sig - y) / n, own=True)

    return _make(out_data, (logits,), backward)


def l2_distance_sq(pred: Tensor, target: Tensor) -> Tensor:
    """Sum over rows of the squared Euclidean distance between row pairs."""
    if pred.shape != target.shape:
        raise DimensionError(f"shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).sum()
