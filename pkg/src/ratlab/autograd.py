"""Define-by-run reverse-mode autodiff over dense float64 arrays.

A :class:`Tape` records every operation whose inputs are tracked (parameters,
or results of earlier recorded operations) while it is the active tape.
``tape.backward(loss)`` walks the records in reverse and returns gradients
for every parameter that the loss depends on.

>>> w = Tensor([[1.0, 2.0]], requires_grad=True)
>>> with Tape() as tape:
...     loss = (w * w).sum()
>>> tape.backward(loss)[w]
array([[2., 4.]])
"""
from __future__ import annotations

import threading
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

from ratlab import kernels

EPS = 1e-12

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes, detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes {', '.join(str(tuple(s)) for s in shapes)}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SaturationWarning(RuntimeWarning):
    """A probability hit the clamping floor before a log."""


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "node")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name
        self.node = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, grad={self.tracked})"

    # operators
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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)

    def sum(self, axis=None, keepdims: bool = False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def detach(self):
        return Tensor(self.data)


class Node:
    __slots__ = ("kind", "inputs", "out", "backward", "index")

    def __init__(self, kind, inputs, out, backward, index):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.backward = backward
        self.index = index


class Tape:
    """Ordered record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self):
        stack = _stack()
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor,
               backward: Callable[[np.ndarray], Sequence]) -> None:
        node = Node(kind, tuple(inputs), out, backward, len(self.nodes))
        self.nodes.append(node)
        out.node = node

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None
                 ) -> dict[Tensor, np.ndarray]:
        """Return ``{param: dloss/dparam}``.

        Every tensor in `params` gets an entry (zeros when the loss does not
        depend on it). Without `params`, every reachable parameter is returned.
        """
        if loss.data.size != 1:
            raise ShapeError("backward", loss.shape, detail="loss must be scalar")
        grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}
        node = loss.node
        if node is not None and node.index < len(self.nodes) and self.nodes[node.index] is node:
            grads[id(loss)] = np.ones_like(loss.data)
        elif loss.requires_grad:
            leaves[id(loss)] = loss
            grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for inp, ig in zip(node.inputs, node.backward(g)):
                if ig is None or not isinstance(inp, Tensor) or not inp.tracked:
                    continue
                if ig.shape != inp.shape:
                    raise ShapeError(f"backward[{node.kind}]", ig.shape, inp.shape)
                key = id(inp)
                if inp.requires_grad and inp.node is None:
                    leaves[key] = inp
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        out = {t: grads[k] for k, t in leaves.items() if k in grads}
        if params is not None:
            out = {p: out.get(p, np.zeros_like(p.data)) for p in params}
        return out


def _stack() -> list:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


class no_grad:
    """Suspend recording (evaluation passes)."""

    def __enter__(self):
        _stack().append(None)

    def __exit__(self, *exc):
        _stack().pop()
        return False


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.name = None
    out.node = None
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        tape.record(kind, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    shape = _broadcast_shape("div", a, b)
    y = np.broadcast_to(a.data / b.data, shape)

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * y / b.data, b.shape)

    return _make("div", np.array(y), (a, b), backward)


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    """Natural log with the input clamped at ``EPS``."""
    safe = np.maximum(x.data, EPS)
    live = x.data > EPS
    return _make("log", np.log(safe), (x,), lambda g: (np.where(live, g / safe, 0.0),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (x,), backward)


# -- reductions / shape ----------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make("sum", np.asarray(y, dtype=np.float64), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / float(n))


def mean_pool(x: Tensor, axis: int) -> Tensor:
    return mean(x, axis=axis)


def max_pool(x: Tensor, axis: int) -> Tensor:
    """Max along `axis`; ties send the gradient to the first maximiser."""
    idx = np.expand_dims(x.data.argmax(axis=axis), axis)
    y = np.take_along_axis(x.data, idx, axis=axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make("max-pool", np.squeeze(y, axis=axis), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", x.shape, tuple(shape)) from None
    return _make("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _make("swapaxes", np.swapaxes(x.data, a, b), (x,),
                 lambda g: (np.swapaxes(g, a, b),))


def getitem(x: Tensor, index) -> Tensor:
    y = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return _make("getitem", np.array(y, dtype=np.float64), (x,), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [as_tensor(t) for t in xs]
    try:
        y = np.concatenate([t.data for t in xs], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in xs]) from None
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", y, xs, backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        y = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _make("matmul", y, (a, b), backward)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError("embedding-lookup", table.shape, ids.shape, detail="table must be 2-D")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError("embedding-lookup", table.shape, ids.shape, detail="id out of range")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _make("embedding-lookup", table.data[ids], (table,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    return Tensor(x.data)


# -- recurrent -------------------------------------------------------------

def gru_scan(gx: Tensor, U: Tensor, reverse: bool = False) -> Tensor:
    """Run a GRU over time given precomputed input projections.

    `gx` is (B, L, 3H): ``x_t @ W + b`` for the update, reset and candidate
    blocks in that order. `U` is (H, 3H). Initial state is zero::

        z = sigmoid(gx_z + h U_z);  r = sigmoid(gx_r + h U_r)
        n = tanh(gx_n + (r * h) U_n);  h' = (1 - z) * h + z * n
    """
    if gx.ndim != 3 or U.ndim != 2 or U.shape[1] != 3 * U.shape[0] or gx.shape[2] != U.shape[1]:
        raise ShapeError("gru", gx.shape, U.shape)
    if gx.shape[1] == 0:
        raise ShapeError("gru", gx.shape, U.shape, detail="empty sequence")
    g_in = gx.data[:, ::-1] if reverse else gx.data
    g_in = np.ascontiguousarray(g_in)
    Ud = np.ascontiguousarray(U.data)
    hs, z, r, n = kernels.gru_forward(g_in, Ud)

    def backward(g):
        dh = np.ascontiguousarray(g[:, ::-1] if reverse else g)
        dgx, dU = kernels.gru_backward(dh, Ud, hs, z, r, n)
        if reverse:
            dgx = dgx[:, ::-1]
        return np.ascontiguousarray(dgx), dU

    out = hs[:, ::-1] if reverse else hs
    return _make("gru", np.ascontiguousarray(out), (gx, U), backward)


# -- losses ----------------------------------------------------------------

def cross_entropy(pred: Tensor, labels) -> Tensor:
    """``-ln pred[label]`` per row; probabilities are clamped at ``EPS``.

    A 1-D `pred` with an integer label gives a scalar; a (B, C) `pred` with
    B labels gives a (B,) vector.
    """
    labels = np.asarray(labels, dtype=np.int64)
    p = pred.data
    single = p.ndim == 1
    if single:
        p = p[None]
        labels = labels.reshape(1)
    if labels.shape[0] != p.shape[0] or labels.max(initial=0) >= p.shape[1] or labels.min(initial=0) < 0:
        raise ShapeError("cross-entropy", pred.shape, labels.shape, detail="label out of range")
    rows = np.arange(p.shape[0])
    picked = p[rows, labels]
    if np.any(picked <= EPS):
        warnings.warn("cross-entropy saturated at the probability floor", SaturationWarning,
                      stacklevel=2)
    safe = np.maximum(picked, EPS)
    loss = -np.log(safe)

    def backward(g):
        gp = np.zeros_like(p)
        gp[rows, labels] = np.where(picked > EPS, -np.atleast_1d(g) / safe, 0.0)
        return (gp[0] if single else gp,)

    return _make("cross-entropy", loss[0] if single else loss, (pred,), backward)


def js_divergence(p: Tensor, q: Tensor) -> Tensor:
    """Jensen-Shannon divergence in nats along the last axis (0 ln 0 = 0)."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ShapeError("js-divergence", p.shape, q.shape)
    pd, qd = p.data, q.data
    m = 0.5 * (pd + qd)
    msafe = np.maximum(m, EPS)
    lp = np.where(pd > 0, np.log(np.maximum(pd, EPS) / msafe), 0.0)
    lq = np.where(qd > 0, np.log(np.maximum(qd, EPS) / msafe), 0.0)
    val = 0.5 * (pd * lp).sum(axis=-1) + 0.5 * (qd * lq).sum(axis=-1)

    def backward(g):
        g = np.expand_dims(g, -1)
        return g * 0.5 * lp, g * 0.5 * lq

    return _make("js-divergence", np.asarray(val, dtype=np.float64), (p, q), backward)
