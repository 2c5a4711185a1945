"""A small float64 tensor type with tape-based reverse-mode differentiation.

Each op returns a new ``Tensor`` holding its parents and a closure that
pushes the output gradient back to them. ``backward`` walks the graph in
reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    pass


class NotScalar(ValueError):
    pass


class IndexOutOfRange(IndexError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple["Tensor", ...] = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def backward(self) -> None:
        backward(self)


_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (forward values only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def Parameter(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs,
                  _parents=tuple(parents) if needs else (),
                  _backward=backward_fn if needs else None)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: {a.shape} vs {b.shape}") from None


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make(a.data * c, (a,), lambda g: _accumulate(a, g * c))


def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return _make(np.where(on, a.data, 0.0), (a,), lambda g: _accumulate(a, g * on))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * (1.0 - out * out)))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: _accumulate(a, g / a.data))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make(a.data ** 2, (a,), lambda g: _accumulate(a, 2.0 * g * a.data))


# --- shape -----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading dimensions broadcast as in ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def bw(g):
        _accumulate(a, _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape))
        _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape))
    return _make(a.data @ b.data, (a, b), bw)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    """Reverse the last two axes, or permute by ``axes``."""
    a = as_tensor(a)
    if axes is None:
        if a.data.ndim < 2:
            raise ShapeMismatch("transpose needs at least 2 dimensions")
        axes = list(range(a.data.ndim - 2)) + [a.data.ndim - 1, a.data.ndim - 2]
    inverse = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: _accumulate(a, np.transpose(g, inverse)))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[t.shape for t in ts]}") from exc
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        for t, piece in zip(ts, np.split(g, bounds, axis=axis)):
            _accumulate(t, piece)
    return _make(out, ts, bw)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accumulate(a, full)
    return _make(a.data[index], (a,), bw)


def gather_rows(a, rows) -> Tensor:
    """Rows of a 2-D tensor selected by an integer index array (repeats allowed)."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.int64)
    if rows.size and (rows.min() < 0 or rows.max() >= a.shape[0]):
        raise IndexOutOfRange(f"row index outside [0, {a.shape[0]})")
    return slice_(a, rows)


def segment_sum(a, segments, n_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``n_segments`` buckets given by ``segments``."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != a.shape[:1]:
        raise ShapeMismatch(f"segment_sum: {segments.shape} ids for {a.shape[0]} rows")
    out = np.zeros((n_segments,) + a.shape[1:])
    np.add.at(out, segments, a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g[segments]))


# --- reductions ------------------------------------------------------------

def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis, keepdims), 1.0 / n)


# --- normalisation and probabilities ----------------------------------------

def softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        _accumulate(a, p * (g - (g * p).sum(axis=-1, keepdims=True)))
    return _make(p, (a,), bw)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bw(g):
        _accumulate(a, g - p * g.sum(axis=-1, keepdims=True))
    return _make(out, (a,), bw)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply optional affine parameters."""
    a = as_tensor(a)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        ga = (g - g.mean(axis=-1, keepdims=True)
              - xhat * (g * xhat).mean(axis=-1, keepdims=True)) * inv
        _accumulate(a, ga)
    out = _make(xhat, (a,), bw)
    if gain is not None:
        out = mul(out, gain)
    if bias is not None:
        out = add(out, bias)
    return out


# --- losses ----------------------------------------------------------------

def mse(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"mse: {pred.shape} vs {target.shape}")
    return mean(square(sub(pred, target)))


def cross_entropy(logits, targets) -> Tensor:
    """Mean over rows of the negative log-probability of each target class."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeMismatch(f"cross_entropy: logits {logits.shape}, targets {targets.shape}")
    n, c = logits.shape
    if n == 0:
        raise ShapeMismatch("cross_entropy over zero rows")
    if targets.min() < 0 or targets.max() >= c:
        raise IndexOutOfRange(f"target class outside [0, {c})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(n)
    loss = -logp[rows, targets].mean()

    def bw(g):
        d = np.exp(logp)
        d[rows, targets] -= 1.0
        _accumulate(logits, d * (g / n))
    return _make(loss, (logits,), bw)


# --- driver ----------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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
    """Populate ``.grad`` on every tensor that ``loss`` depends on."""
    if loss.data.size != 1:
        raise NotScalar(f"backward needs a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    for node in order:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_of(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Zero the parameters' grads, run backward, return grads (zeros if disconnected)."""
    params = list(params)
    for p in params:
        p.grad = None
    backward(loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


# --- optimiser -------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place to ``params``."""
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self) -> None:
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for k, p in self.params.items()}
        adam_step({k: p.data for k, p in self.params.items()}, grads, self.state,
                  self.lr, self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
