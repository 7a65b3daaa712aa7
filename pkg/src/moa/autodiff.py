"""Dense float64 tensors with reverse-mode automatic differentiation.

The op set is deliberately small and closed: matmul, broadcasting add/mul,
scalar scale, softmax, log, exp, transpose, reshape, row/element gather and
its scatter adjoint, concat, sum/mean reductions, embedding lookup, dropout,
layer normalization, and stop_gradient. Everything else in this codebase is
composed from these. Values are numpy float64 arrays; each forward pass
builds a fresh graph which `backward` traverses once, in reverse topological
order. Gradients accumulate across backward calls until explicitly zeroed.
"""
from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

Array = np.ndarray


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


# Hook consulted on every forward matmul, used by the complexity module to
# count multiply-accumulate operations. Signature: (m, inner, n, tag).
_MATMUL_OBSERVER: Optional[Callable[[int, int, int, Optional[str]], None]] = None


def set_matmul_observer(fn):
    """Install (or clear, with None) the matmul counting hook; returns the previous one."""
    global _MATMUL_OBSERVER
    previous = _MATMUL_OBSERVER
    _MATMUL_OBSERVER = fn
    return previous


class Tensor:
    """A node in the autodiff graph: an f64 array plus an accumulated gradient.

    `grad` is populated (and accumulated into) by `backward` for every node
    with requires_grad=True; it always shape-matches `data`. Tensors are
    treated as immutable while a graph referencing them is alive; parameter
    updates happen between steps, after the step's graph is discarded.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False,
                 _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Optional[Array] = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar for the common compositions.
    def __add__(self, other): return add(self, _as_tensor(other))
    def __radd__(self, other): return add(_as_tensor(other), self)
    def __mul__(self, other): return mul(self, _as_tensor(other))
    def __rmul__(self, other): return mul(_as_tensor(other), self)
    def __neg__(self): return scale(self, -1.0)
    def __sub__(self, other): return sub(self, _as_tensor(other))
    def __rsub__(self, other): return sub(_as_tensor(other), self)
    def __matmul__(self, other): return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.zero_grad()


def _node(data: Array, parents: Sequence[Tensor], backward_fn) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires,
                  _parents=tuple(parents),
                  _backward=backward_fn if requires else None)


def _toposort(root: Tensor) -> list:
    """Iterative post-order over parents; each node appears exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate dLoss/dNode into .grad for every requires_grad node.

    The per-call flow of gradients lives in a private map so that repeated
    backward calls on the same graph accumulate correctly instead of
    compounding stale intermediate gradients.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _toposort(loss)
    flows: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            held = flows.get(key)
            flows[key] = pg if held is None else held + pg


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum `grad` over the axes numpy broadcasting introduced, back to `shape`."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Core ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape),
                                          _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data
    return _node(data, (a, b), lambda g: (_unbroadcast(g * b.data, a.shape),
                                          _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(x.data * c, (x,), lambda g: (g * c,))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def matmul(a: Tensor, b: Tensor, tag: Optional[str] = None) -> Tensor:
    """2-D matrix product. dA = dC @ B^T, dB = A^T @ dC."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    if _MATMUL_OBSERVER is not None:
        _MATMUL_OBSERVER(a.shape[0], a.shape[1], b.shape[1], tag)
    data = a.data @ b.data
    return _node(data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose expects a 2-D tensor, got {x.shape}")
    return _node(x.data.T, (x,), lambda g: (g.T,))


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _node(data, tuple(tensors), back)


def gather_rows(x: Tensor, indices) -> Tensor:
    """Select rows (axis 0) by integer index; duplicate indices sum in backward.

    Doubles as embedding lookup when `x` is the embedding table.
    """
    idx = np.asarray(indices, dtype=np.int64)

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(x.data[idx], (x,), back)


embedding = gather_rows


def take_along(x: Tensor, indices) -> Tensor:
    """Per-row element gather on a 2-D tensor: out[t, j] = x[t, indices[t, j]]."""
    if x.data.ndim != 2:
        raise DimensionError(f"take_along expects a 2-D tensor, got {x.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    rows = np.arange(x.shape[0])[:, None]

    def back(g):
        out = np.zeros_like(x.data)
        np.add.at(out, (np.broadcast_to(rows, idx.shape), idx), g)
        return (out,)

    return _node(np.take_along_axis(x.data, idx, axis=1), (x,), back)


def scatter_rows(x: Tensor, indices, num_rows: int) -> Tensor:
    """Adjoint of gather_rows: place rows of x at `indices` in a zero tensor.

    Rows mapped to the same destination are summed.
    """
    idx = np.asarray(indices, dtype=np.int64)
    data = np.zeros((num_rows,) + x.shape[1:], dtype=np.float64)
    np.add.at(data, idx, x.data)
    return _node(data, (x,), lambda g: (g[idx],))


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g.reshape((1,) * x.data.ndim), x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _node(data, (x,), back)


def reduce_mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Stable softmax (max-subtracted). Rows of -inf entries get exact zeros."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return _node(y, (x,), back)


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x.data,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _node(y, (x,), lambda g: (g * y,))


# Capture/replay support for finite-difference checks. stop_gradient defines a
# gradient that is NOT the derivative of the raw forward map (the detached
# value's sensitivity is dropped on purpose), so a numeric check must evaluate
# the forward with detached values frozen at the base point. The tape records
# them in call order; replay substitutes them.
_SG_TAPE: Optional[list] = None
_SG_REPLAY: Optional[list] = None
_SG_CURSOR: int = 0


class _StopGradientTape:
    def __init__(self, tape=None):
        self.tape = tape

    def __enter__(self):
        global _SG_TAPE, _SG_REPLAY, _SG_CURSOR
        if self.tape is None:
            self.tape = []
            _SG_TAPE = self.tape
        else:
            _SG_REPLAY = self.tape
            _SG_CURSOR = 0
        return self.tape

    def __exit__(self, *exc):
        global _SG_TAPE, _SG_REPLAY
        _SG_TAPE = None
        _SG_REPLAY = None
        return False


def record_stop_gradients() -> _StopGradientTape:
    """Context manager capturing every stop_gradient value, in call order."""
    return _StopGradientTape()


def replay_stop_gradients(tape: list) -> _StopGradientTape:
    """Context manager pinning stop_gradient outputs to previously captured values."""
    return _StopGradientTape(tape)


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; contributes exactly zero gradient to its ancestors."""
    global _SG_CURSOR
    if _SG_REPLAY is not None:
        data = _SG_REPLAY[_SG_CURSOR]
        _SG_CURSOR += 1
        if data.shape != x.shape:
            raise ValueError("stop_gradient replay shape mismatch: "
                             f"{data.shape} vs {x.shape}")
        return Tensor(data)
    if _SG_TAPE is not None:
        _SG_TAPE.append(x.data)
    return Tensor(x.data, requires_grad=False)


def dropout(x: Tensor, rate: float, rng: np.random.Generator,
            train: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    if not train or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply elementwise gain and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def back(g):
        dgain = _unbroadcast(g * xhat, gain.shape)
        dbias = _unbroadcast(g, bias.shape)
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return (dx, dgain, dbias)

    return _node(xhat * gain.data + bias.data, (x, gain, bias), back)


# ---------------------------------------------------------------------------
# Compositions (no new backward rules)
# ---------------------------------------------------------------------------

def div(a: Tensor, b: Tensor) -> Tensor:
    """a / b for strictly positive b, composed as a * exp(-log(b))."""
    return mul(a, exp(scale(log(b), -1.0)))


def relu(x: Tensor) -> Tensor:
    # The 0/1 mask is data-dependent but constant in the graph, so relu is a
    # single mul; its gradient is exactly the mask.
    return mul(x, Tensor((x.data > 0).astype(np.float64)))


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    shift = Tensor(x.data.max(axis=axis, keepdims=True))
    out = add(log(reduce_sum(exp(sub(x, shift)), axis=axis, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, np.squeeze(out.data, axis=axis).shape)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return sub(x, logsumexp(x, axis=axis, keepdims=True))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), stabilized as max(x, 0) + log(e^{-max} + e^{x-max})."""
    m = Tensor(np.maximum(x.data, 0.0))
    return add(m, log(add(exp(scale(m, -1.0)), exp(sub(x, m)))))
