"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Define-by-run: operations executed while a `Tape` is active are recorded and
can be differentiated by `Tape.backward(loss)`. Without an active tape the
same functions are plain numpy computations. Arrays are float32 by default
(float64 is accepted so test oracles can run the identical graph in double
precision).

A tape and the tensors it records are confined to one thread; independent
tapes may run concurrently.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeError

GELU_K = 0.7978845608028654  # sqrt(2/pi)
GELU_C = 0.044715
LAYER_NORM_EPS = 1e-5


class Tensor:
    """A dense array plus an optional gradient of the same shape."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None

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

    def detach(self) -> "Tensor":
        """A new tensor sharing this tensor's values but outside the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


_STACK = threading.local()


def _active() -> "Tape | None":
    return getattr(_STACK, "tape", None)


class Tape:
    """Ordered record of operations for one forward pass.

    Backward traverses in strict reverse recording order; gradient
    accumulation is additive, so calling backward twice doubles every grad.
    """

    def __init__(self):
        self._records = []

    def __enter__(self):
        if _active() is not None:
            raise RuntimeError("a Tape is already active in this thread")
        _STACK.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _STACK.tape = None
        return False

    def record(self, out, inputs, vjp):
        self._records.append((out, inputs, vjp))

    def __len__(self):
        return len(self._records)

    def backward(self, loss: Tensor):
        """Populate `.grad` on every tensor that `loss` depends on."""
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        adjoint = {id(loss): np.ones_like(loss.data)}
        tensors = {id(loss): loss}
        for out, inputs, vjp in reversed(self._records):
            g = adjoint.get(id(out))
            if g is None:
                continue
            grads = vjp(g)
            for t, gt in zip(inputs, grads):
                if t is None or gt is None:
                    continue
                key = id(t)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + gt
                else:
                    adjoint[key] = gt
                    tensors[key] = t
        for key, g in adjoint.items():
            t = tensors[key]
            t.grad = g if t.grad is None else t.grad + g


def _emit(out, inputs, vjp) -> Tensor:
    tape = _active()
    if tape is not None:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product along the last two axes, broadcasting leading axes.

    The right operand may be a plain vector (k,), in which case the left
    operand contracts its last axis against it.
    """
    if a.ndim < 2:
        raise ShapeError(f"matmul left operand must be at least 2-d, got {a.shape}")
    if b.ndim < 1:
        raise ShapeError("matmul right operand must be at least 1-d")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))
    A, B = a.data, b.data

    def vjp(g):
        if B.ndim == 1:
            da = g[..., None] * B
            db = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1)
        else:
            da = _unbroadcast(np.matmul(g, _swap(B)), A.shape)
            db = _unbroadcast(np.matmul(_swap(A), g), B.shape)
        return da, db

    return _emit(out, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    return _emit(out, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data)
    return _emit(out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    A, B = a.data, b.data
    return _emit(out, (a, b), lambda g: (g * B, g * A))


def scale(x: Tensor, s) -> Tensor:
    """Multiply by a python float or by a scalar (size-1) tensor."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale factor must be scalar, got shape {s.shape}")
        out = Tensor(x.data * s.data)
        X, S = x.data, s.data

        def vjp(g):
            return g * S, np.sum(g * X, dtype=X.dtype).reshape(S.shape)

        return _emit(out, (x, s), vjp)
    f = float(s)
    out = Tensor(x.data * np.asarray(f, dtype=x.dtype))
    return _emit(out, (x,), lambda g: (g * np.asarray(f, dtype=g.dtype),))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-d bias along the last axis."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"bias shape {b.shape} incompatible with {x.shape}")
    out = Tensor(x.data + b.data)

    def vjp(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _emit(out, (x, b), vjp)


def gelu(x: Tensor) -> Tensor:
    """GELU with the tanh approximation (fixed so oracle values reproduce)."""
    X = x.data
    x2 = X * X
    t = np.tanh(GELU_K * (X + GELU_C * (x2 * X)))
    out = Tensor(0.5 * X * (1.0 + t))

    def vjp(g):
        du = GELU_K * (1.0 + (3.0 * GELU_C) * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * X * (1.0 - t * t) * du),)

    return _emit(out, (x,), vjp)


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    z = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = Tensor(y)
    return _emit(out, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = Tensor(y)
    return _emit(out, (x,), lambda g: (g * y,))


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _emit(out, (x,), vjp)


def layer_norm(x: Tensor) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine params)."""
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    centered = X - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(LAYER_NORM_EPS, dtype=X.dtype))
    xhat = centered * inv
    out = Tensor(xhat)

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _emit(out, (x,), vjp)


def mean_pool(x: Tensor, axis: int) -> Tensor:
    """Mean over one axis (the axis is removed)."""
    ax = axis if axis >= 0 else x.ndim + axis
    if not 0 <= ax < x.ndim:
        raise ShapeError(f"mean_pool axis {axis} out of range for shape {x.shape}")
    n = x.shape[ax]
    out = Tensor(x.data.mean(axis=ax))
    shape = x.shape

    def vjp(g):
        ge = np.expand_dims(g, ax)
        return (np.broadcast_to(ge, shape) / np.asarray(n, dtype=g.dtype),)

    return _emit(out, (x,), vjp)


def sum_all(x: Tensor) -> Tensor:
    # accumulate in float64 so reduction error stays below oracle tolerances
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype))
    shape = x.shape
    return _emit(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype))
    shape, n = x.shape, x.size
    return _emit(
        out, (x,), lambda g: (np.broadcast_to(g / np.asarray(n, dtype=g.dtype), shape).copy(),)
    )


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _emit(out, (x,), lambda g: (g.reshape(orig),))


def swap_last2(x: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"swap_last2 needs at least 2 axes, got {x.shape}")
    out = Tensor(_swap(x.data))
    return _emit(out, (x,), lambda g: (_swap(g),))


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along the last axis."""
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}) invalid for last axis of {x.shape}")
    out = Tensor(x.data[..., start:stop])
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        z[..., start:stop] = g
        return (z,)

    return _emit(out, (x,), vjp)


def concat_last(parts) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_last needs at least one tensor")
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.shape[:-1] != lead:
            raise ShapeError("concat_last leading shapes differ")
    out = Tensor(np.concatenate([p.data for p in parts], axis=-1))
    widths = [p.shape[-1] for p in parts]

    def vjp(g):
        grads, off = [], 0
        for w in widths:
            grads.append(g[..., off : off + w])
            off += w
        return tuple(grads)

    return _emit(out, tuple(parts), vjp)


def take_rows(x: Tensor, indices) -> Tensor:
    """Gather rows of a 2-d tensor (embedding-style lookup)."""
    if x.ndim != 2:
        raise ShapeError(f"take_rows needs a 2-d tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("take_rows index out of range")
    out = Tensor(x.data[idx])
    shape = x.shape

    def vjp(g):
        z = np.zeros(shape, dtype=g.dtype)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(out, (x,), vjp)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each vector along the last axis to unit Euclidean norm."""
    X = x.data
    n = np.sqrt((X**2).sum(axis=-1, keepdims=True))
    n = np.maximum(n, np.asarray(eps, dtype=X.dtype))
    y = X / n
    out = Tensor(y)

    def vjp(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / n,)

    return _emit(out, (x,), vjp)


def straight_through(f: Tensor, f_hat) -> Tensor:
    """Forward the quantized values, route the gradient to the pre-quantized input.

    `f_hat` (a tensor or array produced by a quantizer) receives no gradient.
    """
    values = f_hat.data if isinstance(f_hat, Tensor) else np.asarray(f_hat)
    if values.shape != f.shape:
        raise ShapeError(f"straight_through shapes differ: {f.shape} vs {values.shape}")
    out = Tensor(values.astype(f.dtype, copy=True))
    return _emit(out, (f,), lambda g: (g,))


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of row-softmax against integer targets."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy_rows needs 2-d logits, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    rows, ncls = logits.shape
    if t.shape != (rows,):
        raise ShapeError(f"targets shape {t.shape} does not match {rows} rows")
    if t.size and (t.min() < 0 or t.max() >= ncls):
        raise ShapeError("target class id out of range")
    X = logits.data
    m = X.max(axis=-1, keepdims=True)
    z = X - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    out = Tensor(np.asarray((lse - X[np.arange(rows), t]).mean(), dtype=X.dtype))

    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        p[np.arange(rows), t] -= 1.0
        return (g * p / np.asarray(rows, dtype=p.dtype),)

    return _emit(out, (logits,), vjp)


def soft_cross_entropy_rows(logits: Tensor, q) -> Tensor:
    """Mean cross-entropy of row-softmax against target distributions `q`.

    Each row of `q` must sum to 1; `q` is a constant (no gradient).
    """
    Q = np.asarray(q)
    if logits.ndim != 2 or Q.shape != logits.shape:
        raise ShapeError(f"soft targets shape {Q.shape} does not match logits {logits.shape}")
    X = logits.data
    rows = X.shape[0]
    m = X.max(axis=-1, keepdims=True)
    z = X - m
    lse = np.log(np.exp(z).sum(axis=-1)) + m[:, 0]
    out = Tensor(np.asarray((lse - (Q * X).sum(axis=-1)).mean(), dtype=X.dtype))

    def vjp(g):
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        return (g * (p - Q) / np.asarray(rows, dtype=p.dtype),)

    return _emit(out, (logits,), vjp)
