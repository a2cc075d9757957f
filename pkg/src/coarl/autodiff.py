"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every differentiable op appends a :class:`Node` to the calling thread's
:class:`ComputationRecord`. :func:`backward` replays that record in reverse,
adds gradients into the ``.grad`` of leaf tensors, and clears the record, so a
second ``backward`` without a new forward pass raises :class:`AutodiffError`.
Leaf gradients accumulate until :func:`zero_grads` is called.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import kernels

LAYER_NORM_EPS = 1e-5


class AutodiffError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class Node:
    op: str
    inputs: tuple
    output: "Tensor"
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class ComputationRecord:
    nodes: list = field(default_factory=list)

    def clear(self):
        self.nodes.clear()


_local = threading.local()


def current_record() -> ComputationRecord:
    rec = getattr(_local, "record", None)
    if rec is None:
        rec = _local.record = ComputationRecord()
    return rec


def _grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.is_leaf = True
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return tsum(self, None) * (1.0 / self.data.size)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name=None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(op, data, inputs, backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.is_leaf = False
    track = _grad_enabled() and any(t.requires_grad for t in inputs)
    out.requires_grad = track
    if track:
        current_record().nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc
    sa, sb = a.shape, b.shape
    return _make("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a) -> Tensor:
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc
    ad, bd = a.data, b.data

    def bw(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), bw)


def exp(a) -> Tensor:
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def clip(a, lo, hi) -> Tensor:
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)
    return _make("clip", out, (a,), lambda g: (g * inside,))


def minimum(a, b) -> Tensor:
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = _as_tensor(a), _as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)
    sa, sb = a.shape, b.shape
    return _make(
        "minimum",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)),
    )


def gelu(x) -> Tensor:
    """tanh-approximated GELU."""
    xd = x.data
    return _make("gelu", kernels.gelu_fwd(xd), (x,), lambda g: (kernels.gelu_bwd(g, xd),))


def dropout(x, rate, rng) -> Tensor:
    if rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)


# --------------------------------------------------------------------------
# shape
# --------------------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make("transpose", a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def tsum(a, axis=None) -> Tensor:
    src = a.shape
    out = np.asarray(a.data.sum(axis=axis), dtype=np.float64)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, src).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _make("sum", out, (a,), bw)


def embedding_lookup(table, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise ValueError(f"embedding_lookup: ids must lie in [0, {vocab})")
    out = table.data[ids]

    def bw(g):
        grad = np.zeros_like(table.data)
        np.add.at(grad, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (grad,)

    return _make("embedding", out, (table,), bw)


def gather_last(x, ids) -> Tensor:
    """out[..., i] = x[..., i, ids[..., i]] for x of shape (..., T, V)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"gather_last: ids {ids.shape} do not match {x.shape[:-1]}")
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]
    src = x.shape

    def bw(g):
        grad = np.zeros(src)
        np.put_along_axis(grad, ids[..., None], g[..., None], axis=-1)
        return (grad,)

    return _make("gather", out, (x,), bw)


# --------------------------------------------------------------------------
# linear algebra and normalisation
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    out = np.matmul(ad, bd)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = np.matmul(np.swapaxes(ad, -1, -2), g)
        return ga, gb

    return _make("matmul", out, (a, b), bw)


def _move_last(x, axis):
    return x if axis in (-1, x.ndim - 1) else np.moveaxis(x, axis, -1)


def _move_back(x, axis, ndim):
    return x if axis in (-1, ndim - 1) else np.moveaxis(x, -1, axis)


def softmax(x, axis=-1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    y = kernels.softmax_fwd(_move_last(x.data, axis))
    out = _move_back(y, axis, x.ndim)

    def bw(g):
        return (_move_back(kernels.softmax_bwd(_move_last(g, axis), y), axis, x.ndim),)

    return _make("softmax", out, (x,), bw)


def log_softmax(x, axis=-1) -> Tensor:
    if x.shape[axis] == 0:
        raise ShapeError("log_softmax over an empty axis")
    y = kernels.log_softmax_fwd(_move_last(x.data, axis))
    out = _move_back(y, axis, x.ndim)

    def bw(g):
        return (_move_back(kernels.log_softmax_bwd(_move_last(g, axis), y), axis, x.ndim),)

    return _make("log_softmax", out, (x,), bw)


def layer_norm(x, gain, bias, eps=LAYER_NORM_EPS) -> Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty axis")
    y, xhat, rstd = kernels.layer_norm_fwd(x.data, gain.data, bias.data, eps)
    shape = x.shape

    def bw(g):
        dx, dgain, dbias = kernels.layer_norm_bwd(g, xhat, rstd, gain.data)
        return dx.reshape(shape), dgain, dbias

    return _make("layer_norm", y, (x, gain, bias), bw)


def cross_entropy(logits, targets, ignore_id=-100) -> Tensor:
    """Mean NLL of ``targets`` under ``logits`` (..., V), skipping ``ignore_id``."""
    targets = np.asarray(targets, dtype=np.int64)
    vocab = logits.shape[-1]
    if targets.shape != logits.shape[:-1]:
        raise ShapeError(f"cross_entropy: targets {targets.shape} vs logits {logits.shape}")
    flat_t = targets.ravel()
    bad = (flat_t != ignore_id) & ((flat_t < 0) | (flat_t >= vocab))
    if bad.any():
        raise ValueError(f"cross_entropy: target id {int(flat_t[bad][0])} outside [0, {vocab})")
    total, count, logp = kernels.cross_entropy_fwd(logits.data.reshape(-1, vocab), flat_t, ignore_id)
    if count == 0:
        raise ValueError("cross_entropy: every target is ignore_id")
    shape = logits.shape

    def bw(g):
        return (kernels.cross_entropy_bwd(logp, flat_t, ignore_id, float(g) / count).reshape(shape),)

    return _make("cross_entropy", np.asarray(total / count), (logits,), bw)


# --------------------------------------------------------------------------
# backward pass
# --------------------------------------------------------------------------


def backward(loss: Tensor) -> None:
    if loss.data.size != 1 or loss.ndim > 1:
        raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise AutodiffError("loss does not depend on any tensor that requires grad")
    rec = current_record()
    nodes = rec.nodes
    if not any(n.output is loss for n in reversed(nodes)):
        raise AutodiffError("loss is not in the active computation record (backward already ran?)")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.data)
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    rec.clear()


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def numerical_grad(fn: Callable[[], float], x: Tensor, h: float = 1e-6) -> np.ndarray:
    """Central finite differences of the scalar ``fn()`` w.r.t. ``x.data``."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """``max|a - n| / max(max|n|, floor)``: the error scaled by the gradient's magnitude."""
    scale = max(float(np.max(np.abs(numeric))) if numeric.size else 0.0, floor)
    return float(np.max(np.abs(analytic - numeric))) / scale if analytic.size else 0.0


def gradient_check(loss_fn: Callable[[], Tensor], params, h: float = 1e-6) -> dict:
    """Relative error between backprop and central differences for each tensor.

    ``loss_fn`` rebuilds the scalar loss from scratch; ``params`` are leaf
    tensors (or ``(name, tensor)`` pairs).
    """
    pairs = [(p if isinstance(p, tuple) else (p.name or str(i), p)) for i, p in enumerate(params)]
    zero_grads(t for _, t in pairs)
    backward(loss_fn())
    out = {}
    for name, t in pairs:
        with no_grad():
            num = numerical_grad(lambda: loss_fn().item(), t, h)
        out[name] = max_relative_error(t.grad, num)
    return out
