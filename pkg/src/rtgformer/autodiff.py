"""Reverse-mode automatic differentiation over dense numpy arrays.

A `Tensor` wraps an ndarray; every primitive op appends a node to the
active `Tape` (record-and-replay semantics: the graph is never mutated
after the forward pass). `backward` walks the tape in reverse execution
order, which is a valid reverse topological order by construction.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatchError",
    "no_grad",
    "tensor",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax",
    "layer_norm",
    "gelu",
    "concat",
    "take",
    "embedding_lookup",
    "transpose",
    "reshape",
    "masked_fill",
    "mean",
    "tsum",
    "stop_gradient",
    "backward",
    "grad_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

LAYER_NORM_EPS = 1e-5


class ShapeMismatchError(ValueError):
    """Raised when an op receives shape-incompatible inputs."""

    def __init__(self, op: str, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "backward_fn")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf",
                 parents: tuple = (), backward_fn: Optional[Callable] = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed primitive ops (inputs precede outputs)."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def clear(self):
        self.nodes.clear()


_active_tape = Tape()
_grad_enabled = True


def active_tape() -> Tape:
    return _active_tape


class no_grad:
    """Context manager: ops inside compute forward values only."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class fresh_tape:
    """Context manager installing a new tape (one tape per training step)."""

    def __enter__(self) -> Tape:
        global _active_tape
        self._prev = _active_tape
        _active_tape = Tape()
        return _active_tape

    def __exit__(self, *exc):
        global _active_tape
        _active_tape = self._prev
        return False


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr, requires_grad=requires_grad)


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor],
          backward_fn: Callable) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=req, op=op,
                 parents=tuple(parents) if req else (),
                 backward_fn=backward_fn if req else None)
    if req:
        _active_tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a gradient back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 1 or b.data.ndim < 1 or a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else -1]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeMismatchError("matmul", a.shape, b.shape) from e

    def bw(g):
        bt = np.swapaxes(b.data, -1, -2)
        at = np.swapaxes(a.data, -1, -2)
        ga = _unbroadcast(np.matmul(g, bt), a.data.shape)
        gb = _unbroadcast(np.matmul(at, g), b.data.shape)
        return ga, gb

    return _make(out, "matmul", (a, b), bw)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeMismatchError(op, a.shape, b.shape) from e


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("add", a, b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("sub", a, b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_check("mul", a, b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make(out, "mul", (a, b), bw)


def scale(x: Tensor, c: float) -> Tensor:
    out = x.data * c

    def bw(g):
        return (g * c,)

    return _make(out, "scale", (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not (-x.data.ndim <= axis < x.data.ndim):
        raise ShapeMismatchError("softmax", x.shape, f"axis={axis}")
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, "softmax", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ShapeMismatchError("layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = gain.data * xhat + bias.data

    def bw(g):
        dxhat = g * gain.data
        # fused layer-norm backward
        gx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.data.ndim - 1))
        ggain = (g * xhat).sum(axis=red)
        gbias = g.sum(axis=red)
        return gx, ggain, gbias

    return _make(out, "layer_norm", (x, gain, bias), bw)


def gelu(x: Tensor) -> Tensor:
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def bw(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (phi + x.data * pdf),)

    return _make(out, "gelu", (x,), bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not xs:
        raise ShapeMismatchError("concat", "empty input list")
    out = np.concatenate([t.data for t in xs], axis=axis)
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for i in range(len(xs)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return _make(out, "concat", tuple(xs), bw)


def take(x: Tensor, key) -> Tensor:
    """Basic slicing (the spec's slice op); gradient scatters into zeros."""
    out = x.data[key]

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] = g
        return (gx,)

    return _make(out, "slice", (x,), bw)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeMismatchError("embedding_lookup", table.shape, f"ids in [{ids.min()},{ids.max()}]")
    out = table.data[ids]

    def bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return _make(out, "embedding_lookup", (table,), bw)


def transpose(x: Tensor, axes: tuple) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return _make(out, "transpose", (x,), bw)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.data.shape),)

    return _make(out, "reshape", (x,), bw)


def masked_fill(x: Tensor, mask: np.ndarray, value: float) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError as e:
        raise ShapeMismatchError("masked_fill", x.shape, mask.shape) from e
    out = np.where(mask, value, x.data)

    def bw(g):
        return (_unbroadcast(np.where(mask, 0.0, g), x.data.shape),)

    return _make(out, "masked_fill", (x,), bw)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.mean(axis=axis, keepdims=keepdims)
    n = x.data.size if axis is None else np.prod([x.data.shape[a] for a in np.atleast_1d(axis)])

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape) / n,)

    return _make(out, "mean", (x,), bw)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.data.shape).copy(),)

    return _make(out, "sum", (x,), bw)


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity; blocks all gradient flow through this edge."""
    return Tensor(x.data, requires_grad=False, op="stop_gradient")


# ---------------------------------------------------------------------------
# backward pass and verification
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate `.grad` on every requires_grad tensor reachable from `loss`."""
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.data.shape}")
    tape = tape if tape is not None else _active_tape
    loss.grad = np.ones_like(loss.data)
    seen = False
    for node in reversed(tape.nodes):
        if node is loss:
            seen = True
        if not seen or node.grad is None or node.backward_fn is None:
            continue
        grads = node.backward_fn(node.grad)
        for parent, g in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.zeros_like(parent.data)
            parent.grad += g


def zero_grads(params) -> None:
    for p in (params.values() if isinstance(params, dict) else params):
        p.grad = None


def grad_check(f: Callable[[], Tensor], params: dict, eps: float = 1e-5):
    """Compare backward() gradients of f against central finite differences.

    `f` rebuilds the scalar loss from `params` on every call. Returns
    (max relative error, name of the worst parameter).
    """
    zero_grads(params)
    with fresh_tape() as tape:
        loss = f()
        backward(loss, tape)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    worst = 0.0
    worst_name = ""
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(f().data)
            flat[i] = orig - eps
            with no_grad():
                fm = float(f().data)
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-6)
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{i}]"
    return worst, worst_name
