"""Dense float64 tensors with reverse-mode differentiation and op metering.

Values are stored row-major (C-contiguous) and treated as immutable once
constructed: every operation returns a fresh tensor, and gathers/scatters
copy rather than alias.  When an input of an operation participates in a
gradient computation the result records its parents and a backward rule;
``Tensor.backward()`` then replays the recorded graph exactly once in
reverse topological order.

Arithmetic executed inside a :class:`FlopCounter` context is metered with a
fixed cost model (see the module constants), which the analytic counters in
:mod:`sparsewin.flops` mirror term by term.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

# Cost model for the execution meter.  A multiply-accumulate counts as two
# operations; fused kernels (softmax, layernorm, gelu) are charged at a flat
# per-element rate so the meter and analytic formulas cannot drift apart.
# Elementwise arithmetic costs one op per output element, reductions one op
# per input element, and data movement (reshape, transpose, gather, scatter,
# padding, concatenation) is free.
SOFTMAX_FLOPS_PER_ELEMENT = 5
LAYERNORM_FLOPS_PER_ELEMENT = 7
GELU_FLOPS_PER_ELEMENT = 8

_GELU_COEF = math.sqrt(2.0 / math.pi)
_GELU_CUBIC = 0.044715

_active_counters: list["FlopCounter"] = []


class FlopCounter:
    """Context manager accumulating the op count of code run inside it."""

    def __init__(self) -> None:
        self.flops = 0

    def __enter__(self) -> "FlopCounter":
        _active_counters.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _active_counters.remove(self)
        return False


def _tally(n: int) -> None:
    if _active_counters:
        for counter in _active_counters:
            counter.flops += int(n)


class Tensor:
    """A float64 array plus an optional record of how it was computed."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple["Tensor", ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        grad = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{grad})"

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Propagate d(self)/d(leaf) to every tracked leaf, each node once."""
        if self.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.shape}")
        if self._grad_fn is None and not self.requires_grad:
            raise ValueError("backward() on a tensor with no recorded operations")
        self.grad = np.ones_like(self.data)
        for node in _topo_order(self):
            if node._grad_fn is None or node.grad is None:
                continue
            parent_grads = node._grad_fn(node.grad)
            for parent, grad in zip(node._parents, parent_grads):
                if grad is None:
                    continue
                if parent.requires_grad or parent._grad_fn is not None:
                    parent.grad = grad if parent.grad is None else parent.grad + grad

    # -- operator sugar --------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        return reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)

    def transpose(self, axes) -> "Tensor":
        return transpose(self, axes)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)


def _topo_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, root first, parents after children."""
    seen: set[int] = set()
    order: list[Tensor] = []
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    order.reverse()
    return order


def _lift(value) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=np.float64))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data, dtype=np.float64)
    out.grad = None
    tracked = any(p.requires_grad or p._grad_fn is not None for p in parents)
    out.requires_grad = tracked
    out._parents = parents if tracked else ()
    out._grad_fn = grad_fn if tracked else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data + b.data
    _tally(data.size)
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data - b.data
    _tally(data.size)
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data * b.data
    _tally(data.size)
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    data = a.data / b.data
    _tally(data.size)
    return _make(data, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * data / b.data, b.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    _tally(a.size)
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a) -> Tensor:
    a = _lift(a)
    _tally(a.size)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


# -- linear algebra --------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product; batch dimensions broadcast, inner dims must agree."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise ValueError(f"matmul batch dimensions disagree: {a.shape} @ {b.shape}") from exc
    _tally(2 * a.shape[-1] * data.size)

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make(data, (a, b), grad_fn)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return add(matmul(x, weight), bias)


# -- shape manipulation (data movement, zero cost) --------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    a = _lift(a)
    data = a.data.reshape(shape).copy()
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    a = _lift(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes).copy(), (a,),
                 lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(_lift(t) for t in tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g):
        slicer = [slice(None)] * g.ndim
        grads = []
        for i in range(len(tensors)):
            slicer[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(slicer)])
        return tuple(grads)

    return _make(data, tensors, grad_fn)


def take_rows(a: Tensor, indices: np.ndarray) -> Tensor:
    """Copy rows (entries along the first axis) at ``indices``."""
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.intp)
    data = a.data[indices]

    def grad_fn(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, indices, g)
        return (ga,)

    return _make(data, (a,), grad_fn)


def scatter_rows(base: Tensor, indices: np.ndarray, src: Tensor) -> Tensor:
    """Copy of ``base`` with rows at ``indices`` replaced by rows of ``src``."""
    base, src = _lift(base), _lift(src)
    indices = np.asarray(indices, dtype=np.intp)
    if len(np.unique(indices)) != len(indices):
        raise ValueError("scatter_rows requires unique indices")
    if indices.size and (indices.min() < 0 or indices.max() >= base.shape[0]):
        raise ValueError(
            f"scatter_rows index out of range for {base.shape[0]} rows")
    data = base.data.copy()
    data[indices] = src.data

    def grad_fn(g):
        gb = g.copy()
        gb[indices] = 0.0
        return gb, g[indices]

    return _make(data, (base, src), grad_fn)


# -- reductions -------------------------------------------------------------------


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    _tally(a.size)

    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * a.ndim), a.shape).copy(),)
        g_exp = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_exp, a.shape).copy(),)

    return _make(data, (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


# -- fused nonlinear kernels --------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis`` (max is subtracted first)."""
    a = _lift(a)
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _tally(SOFTMAX_FLOPS_PER_ELEMENT * a.size)

    def grad_fn(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return ((g - dot) * out,)

    return _make(out, (a,), grad_fn)


def gelu(a: Tensor) -> Tensor:
    """tanh-form gaussian error linear unit."""
    a = _lift(a)
    x = a.data
    inner = _GELU_COEF * (x + _GELU_CUBIC * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)
    _tally(GELU_FLOPS_PER_ELEMENT * a.size)

    def grad_fn(g):
        d_inner = _GELU_COEF * (1.0 + 3.0 * _GELU_CUBIC * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * d_inner),)

    return _make(out, (a,), grad_fn)


def identity(a: Tensor) -> Tensor:
    return _lift(a)


@dataclass
class LayerParams:
    """Named tensors making up one layer, tagged by layer kind."""

    kind: str
    tensors: dict[str, Tensor]

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()


def layernorm(x: Tensor, params: LayerParams, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x = _lift(x)
    gain, bias = params["gain"], params["bias"]
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layernorm params sized {gain.shape}/{bias.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = xhat * gain.data + bias.data
    _tally(LAYERNORM_FLOPS_PER_ELEMENT * x.size)

    def grad_fn(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=reduce_axes)
        dbias = g.sum(axis=reduce_axes)
        dxhat = g * gain.data
        dx = inv * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(out, (x, gain, bias), grad_fn)


def mlp_forward(x: Tensor, params: LayerParams,
                activation: Callable[[Tensor], Tensor] = gelu) -> Tensor:
    """Two-layer perceptron: linear, activation, linear."""
    hidden = activation(linear(x, params["w1"], params["b1"]))
    return linear(hidden, params["w2"], params["b2"])


# -- gradient utilities ----------------------------------------------------------


def gradients(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Backpropagate ``loss`` and return d(loss)/d(t) for each ``t`` in wrt."""
    for t in wrt:
        t.grad = None
    loss.backward()
    return [np.zeros_like(t.data) if t.grad is None else t.grad for t in wrt]


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Per coordinate the error is |analytic - fd| / (|analytic| + 1e-8).
    """
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    probe.grad = None
    out.backward()
    analytic = np.zeros_like(probe.data) if probe.grad is None else probe.grad

    flat = x.data.copy().reshape(-1)
    fd = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig - h
        lo = f(Tensor(flat.reshape(x.shape))).item()
        flat[i] = orig
        fd[i] = (hi - lo) / (2.0 * h)
    err = np.abs(analytic.reshape(-1) - fd) / (np.abs(analytic.reshape(-1)) + 1e-8)
    return float(err.max()) if err.size else 0.0


# -- serialization ---------------------------------------------------------------


def save_tensor(fp, t: Tensor) -> None:
    """Write little-endian binary: u32 rank, u32 dims, f64 row-major payload."""
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, "wb") as fh:
            save_tensor(fh, t)
        return
    fp.write(struct.pack("<I", t.ndim))
    fp.write(struct.pack(f"<{t.ndim}I", *t.shape))
    fp.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_tensor(fp) -> Tensor:
    if isinstance(fp, (str, bytes)) or hasattr(fp, "__fspath__"):
        with open(fp, "rb") as fh:
            return load_tensor(fh)
    (rank,) = struct.unpack("<I", fp.read(4))
    shape = struct.unpack(f"<{rank}I", fp.read(4 * rank)) if rank else ()
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fp.read(8 * count), dtype="<f8").reshape(shape)
    return Tensor(data)


def tensor_to_json(t: Tensor) -> dict:
    return {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}


def tensor_from_json(obj: dict) -> Tensor:
    return Tensor(np.asarray(obj["data"], dtype=np.float64).reshape(obj["shape"]))
