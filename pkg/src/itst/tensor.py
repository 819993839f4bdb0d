"""Dense float64 tensors with reverse-mode automatic differentiation.

The execution model is eager: every primitive op computes its result
immediately and, when a :class:`Tape` is active and an input requires
gradients, appends a node holding the backward closure. Because nodes are
appended in execution order, the tape *is* a topological order of the
graph and the reverse sweep is a single reversed iteration with gradient
accumulation at fan-out points. Tapes are cheap, built per forward pass,
and freed by :func:`backward`.

Running ops with no tape active is evaluation mode: identical forward
numerics, nothing recorded. The active-tape stack is thread-local, so
independent tapes may run concurrently on different threads as long as no
tensor is mutated while a tape referencing it is alive.

Numerical conventions baked in here because downstream training depends
on them:

* softmax subtracts the row max before exponentiating,
* cross-entropy is computed through log-sum-exp and never by
  exponentiating and re-logging probabilities,
* layer norm uses the population variance with an epsilon guard, so a
  constant slice normalizes to zeros rather than NaNs.
"""

from __future__ import annotations

import threading
from typing import Iterable, Sequence

import numpy as np

from .errors import LabelError, ShapeError, UsageError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "zero_grads",
    "add",
    "sub",
    "mul",
    "scale",
    "matmul",
    "relu",
    "transpose",
    "reshape",
    "concat",
    "mean",
    "dropout",
    "softmax",
    "layer_norm",
    "cross_entropy",
]


class Tensor:
    """A dense float64 array plus an optional gradient buffer.

    Tensors are value-immutable by contract: once created, ``data`` must
    not change while any live tape references the tensor. Optimizers may
    rebind ``data`` between tapes. Only ``grad`` is mutated in place, and
    only by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False) -> None:
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    """One recorded primitive: output, inputs, and the backward closure."""

    __slots__ = ("out", "inputs", "backfn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backfn) -> None:
        self.out = out
        self.inputs = inputs
        self.backfn = backfn


class _TapeStack(threading.local):
    def __init__(self) -> None:
        self.stack: list["Tape"] = []


_ACTIVE = _TapeStack()


class Tape:
    """Execution-ordered op record; use as a context manager.

    Entering pushes the tape onto the thread-local active stack; ops run
    inside the block record themselves on the innermost tape. The node
    list is a valid topological order by construction, so the reverse
    sweep never needs an explicit sort.
    """

    def __init__(self) -> None:
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _ACTIVE.stack.pop()
        if popped is not self:
            raise UsageError("tapes must be exited in LIFO order")

    def __len__(self) -> int:
        return len(self._nodes)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: Tensor, inputs: tuple[Tensor, ...], backfn) -> Tensor:
    stack = _ACTIVE.stack
    if stack and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = stack[-1]
        out._tape = tape
        tape._nodes.append(_Node(out, inputs, backfn))
    return out


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> None:
    """Reverse sweep from a scalar loss; frees the tape when done.

    Gradients accumulate into ``.grad`` buffers (callers reset them
    between steps with :func:`zero_grads`). Any tensor in ``params`` that
    the sweep never reaches ends up with an explicit zero gradient, so a
    disabled model path contributes exactly zero rather than stale or
    missing values.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    tape = loss._tape
    if tape is None:
        raise UsageError("loss was not recorded on a tape; run the forward pass inside `with Tape():`")

    if loss.grad is None:
        loss.grad = np.ones((), dtype=np.float64)
    else:
        loss.grad = loss.grad + 1.0

    for node in reversed(tape._nodes):
        gout = node.out.grad
        if gout is None:
            continue
        gins = node.backfn(gout)
        for tensor, gin in zip(node.inputs, gins):
            if gin is None or not tensor.requires_grad:
                continue
            if tensor.grad is None:
                # copy: backfns may return views of the upstream gradient
                tensor.grad = np.array(gin)
            else:
                tensor.grad += gin

    tape._nodes.clear()

    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def zero_grads(params: Iterable[Tensor]) -> None:
    """Drop gradient buffers so the next backward starts from zero."""
    for p in params:
        p.grad = None


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None
    out = Tensor(data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backfn(g):
        return (
            _unbroadcast(g, a.shape) if need_a else None,
            _unbroadcast(g, b.shape) if need_b else None,
        )

    return _record(out, (a, b), backfn)


def sub(a, b) -> Tensor:
    """Elementwise difference with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None
    out = Tensor(data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backfn(g):
        return (
            _unbroadcast(g, a.shape) if need_a else None,
            _unbroadcast(-g, b.shape) if need_b else None,
        )

    return _record(out, (a, b), backfn)


def mul(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None
    out = Tensor(data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backfn(g):
        return (
            _unbroadcast(g * b.data, a.shape) if need_a else None,
            _unbroadcast(g * a.data, b.shape) if need_b else None,
        )

    return _record(out, (a, b), backfn)


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar constant."""
    x = _as_tensor(x)
    c = float(c)
    out = Tensor(x.data * c)

    def backfn(g):
        return (g * c,)

    return _record(out, (x,), backfn)


def matmul(a, b) -> Tensor:
    """Matrix product: 2-D x 2-D, or batched 3-D x 3-D with equal batch.

    No implicit broadcasting: mismatched ranks or batch sizes are shape
    errors, not silently expanded.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim not in (2, 3) or b.ndim not in (2, 3) or a.ndim != b.ndim:
        raise ShapeError(f"matmul supports 2-D x 2-D or 3-D x 3-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul batch dims disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    need_a, need_b = a.requires_grad, b.requires_grad

    def backfn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if need_a else None
        gb = np.swapaxes(a.data, -1, -2) @ g if need_b else None
        return ga, gb

    return _record(out, (a, b), backfn)


def relu(x) -> Tensor:
    """max(0, x); the subgradient at exactly zero is zero."""
    x = _as_tensor(x)
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))

    def backfn(g):
        return (g * mask,)

    return _record(out, (x,), backfn)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes (reversed order when ``axes`` is None)."""
    x = _as_tensor(x)
    if axes is None:
        perm = tuple(range(x.ndim))[::-1]
    else:
        perm = tuple(int(i) for i in axes)
        if sorted(perm) != list(range(x.ndim)):
            raise ShapeError(f"transpose axes {perm} invalid for shape {x.shape}")
    inv = tuple(np.argsort(perm))
    out = Tensor(np.transpose(x.data, perm))

    def backfn(g):
        return (np.transpose(g, inv),)

    return _record(out, (x,), backfn)


def reshape(x, shape: Sequence[int]) -> Tensor:
    """Reshape preserving element count (-1 wildcard allowed)."""
    x = _as_tensor(x)
    try:
        data = np.reshape(x.data, tuple(shape))
    except ValueError:
        raise ShapeError(f"cannot reshape {x.shape} into {tuple(shape)}") from None
    out = Tensor(data)
    src_shape = x.data.shape

    def backfn(g):
        return (np.reshape(g, src_shape),)

    return _record(out, (x,), backfn)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate along ``axis``; all other dims must agree exactly."""
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise UsageError("concat needs at least one tensor")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.ndim != len(ref) or any(
            i != axis % p.ndim and p.shape[i] != ref[i] for i in range(p.ndim)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {p.shape} along axis {axis}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backfn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record(out, tuple(parts), backfn)


def mean(x, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Arithmetic mean over one axis (or all elements when axis is None)."""
    x = _as_tensor(x)
    out = Tensor(x.data.mean(axis=axis, keepdims=keepdims))
    src_shape = x.data.shape

    if axis is None:
        count = x.data.size

        def backfn(g):
            return (np.broadcast_to(g / count, src_shape).copy(),)

    else:
        count = x.data.shape[axis]

        def backfn(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, src_shape).copy(),)

    return _record(out, (x,), backfn)


def dropout(x, keep_prob: float, rng: np.random.Generator | None = None, training: bool = False) -> Tensor:
    """Inverted dropout: zero with prob 1-keep_prob, scale survivors by 1/keep_prob.

    Evaluation mode (``training=False``) or ``keep_prob == 1`` is the exact
    identity. The mask expectation makes activations unbiased: E[out] == x.
    """
    if not 0.0 < keep_prob <= 1.0:
        raise UsageError(f"keep_prob must be in (0, 1], got {keep_prob}")
    x = _as_tensor(x)
    if not training or keep_prob == 1.0:
        return x
    if rng is None:
        raise UsageError("training-mode dropout needs an explicit rng stream")
    mask = (rng.random(x.data.shape) < keep_prob) / keep_prob
    out = Tensor(x.data * mask)

    def backfn(g):
        return (g * mask,)

    return _record(out, (x,), backfn)


def softmax(x, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def backfn(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - inner),)

    return _record(out, (x,), backfn)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    Uses the population variance. The epsilon guard means a constant
    slice normalizes to zeros (pre-affine) instead of dividing by zero.
    """
    if eps <= 0.0:
        raise UsageError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine params must have shape ({d},), got {gamma.shape} and {beta.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gamma.data + beta.data)

    def backfn(g):
        lead = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), backfn)


def cross_entropy(logits, targets) -> Tensor:
    """Mean categorical cross-entropy from raw logits.

    Computed via log-sum-exp with max subtraction; probabilities are never
    materialized on the forward path, so extreme logits stay finite.
    Targets must be integer labels in ``[0, C)``.
    """
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects (batch, classes) logits, got {logits.shape}")
    t = np.asarray(targets)
    if not np.issubdtype(t.dtype, np.integer):
        raise LabelError(f"targets must be integers, got dtype {t.dtype}")
    n, c = logits.shape
    if t.shape != (n,):
        raise ShapeError(f"targets shape {t.shape} does not match batch size {n}")
    if t.size and (t.min() < 0 or t.max() >= c):
        bad = int(t[(t < 0) | (t >= c)][0])
        raise LabelError(f"label {bad} outside [0, {c})")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    nll = lse - z[np.arange(n), t]
    out = Tensor(nll.mean())

    def backfn(g):
        p = np.exp(shifted)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), t] -= 1.0
        return (p * (g / n),)

    return _record(out, (logits,), backfn)
