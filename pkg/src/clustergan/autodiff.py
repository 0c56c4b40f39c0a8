"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is built eagerly (define-by-run) and thrown away after each
optimisation step. Every op checks that its output is finite, so a NaN or an
overflow is reported at the op that produced it rather than three layers later.
"""
from __future__ import annotations

import logging
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DTYPE = np.float64


class Tensor:
    """Dense array plus an optional gradient slot and a link to its producer."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None, op: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, op={self.op or 'leaf'})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(as_tensor(other), self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(as_tensor(other), self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(as_tensor(other), self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)

    def __getitem__(self, cols):
        if not isinstance(cols, tuple) or len(cols) != 2 or cols[0] != slice(None):
            raise TypeError("only column slicing x[:, a:b] is supported")
        sl = cols[1]
        if isinstance(sl, int):
            sl = slice(sl, sl + 1)
        start, stop, step = sl.indices(self.shape[1])
        if step != 1:
            raise TypeError("column slices must have unit step")
        return slice_cols(self, start, stop)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True, name=name)


def _make(op: str, out: np.ndarray, parents: tuple, grad_fn: Callable) -> Tensor:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"{op}: non-finite output for shapes "
                                 f"{[p.shape for p in parents]}")
    if any(p.requires_grad for p in parents):
        return Tensor(out, requires_grad=True, _parents=parents, _backward=grad_fn, op=op)
    return Tensor(out, op=op)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# ---------------------------------------------------------------- binary ops

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data
    return _make("div", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T if a.requires_grad else None,
                            a.data.T @ g if b.requires_grad else None))


# ----------------------------------------------------------------- unary ops

def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"transpose: expected a matrix, got shape {a.shape}")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def leaky_relu(a, alpha: float = 0.2) -> Tensor:
    a = as_tensor(a)
    slope = np.where(a.data > 0, 1.0, alpha)
    return _make("leaky_relu", a.data * slope, (a,), lambda g: (g * slope,))


def relu(a) -> Tensor:
    return leaky_relu(a, 0.0)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = np.empty_like(a.data)
    pos = a.data >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    out[~pos] = e / (1.0 + e)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = -np.logaddexp(0.0, -a.data)
    return _make("log_sigmoid", out, (a,), lambda g: (g * np.exp(-np.logaddexp(0.0, a.data)),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise FloatingPointError("log: non-positive input")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def abs(a) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    # np.sign(0) == 0, so the subgradient at the kink is 0
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"softmax_rows: expected a matrix, got shape {a.shape}")
    e = np.exp(a.data - a.data.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)
    return _make("softmax_rows", out, (a,), grad_fn)


def log_softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError(f"log_softmax_rows: expected a matrix, got shape {a.shape}")
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)
    return _make("log_softmax_rows", out, (a,), grad_fn)


def l2_norm_rows(a, eps: float = 1e-12) -> Tensor:
    """Row-wise Euclidean norm, shape (n, 1). Gradient at a zero row is 0."""
    a = as_tensor(a)
    out = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    return _make("l2_norm_rows", out, (a,), lambda g: (g * a.data / np.maximum(out, eps),))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)
    return _make("sum", np.asarray(out), (a,), grad_fn)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def grad_fn(g):
        return tuple(np.take(g, range(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return _make("concat", out, tuple(tensors), grad_fn)


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = as_tensor(a)
    if not 0 <= start < stop <= a.shape[1]:
        raise ValueError(f"slice_cols: [{start}:{stop}] out of range for shape {a.shape}")

    def grad_fn(g):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        return (full,)
    return _make("slice", a.data[:, start:stop], (a,), grad_fn)


def batchnorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Batch-statistics normalisation over axis 0, composed from primitive ops."""
    x = as_tensor(x)
    mu = mean(x, axis=0, keepdims=True)
    centred = sub(x, mu)
    var = mean(square(centred), axis=0, keepdims=True)
    normed = div(centred, sqrt(add(var, eps)))
    return add(mul(normed, gamma), beta)


OPS: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "leaky_relu": leaky_relu,
    "relu": relu,
    "sigmoid": sigmoid,
    "log_sigmoid": log_sigmoid,
    "softmax_rows": softmax_rows,
    "log_softmax_rows": log_softmax_rows,
    "log": log,
    "exp": exp,
    "sqrt": sqrt,
    "mean": mean,
    "sum": sum,
    "square": square,
    "abs": abs,
    "l2_norm_rows": l2_norm_rows,
    "concat": concat,
    "slice": slice_cols,
    "scale": scale,
    "transpose": transpose,
    "batchnorm": batchnorm,
}


def forward_op(name: str, inputs: Sequence, **kwargs) -> Tensor:
    """Apply a named op; ``concat`` takes the input list as a whole."""
    try:
        fn = OPS[name]
    except KeyError:
        raise ValueError(f"unknown op {name!r}; known: {sorted(OPS)}") from None
    tensors = [as_tensor(t) for t in inputs]
    for t in tensors:
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"{name}: non-finite input of shape {t.shape}")
    if name == "concat":
        return fn(tensors, **kwargs)
    return fn(*tensors, **kwargs)


# ------------------------------------------------------------------ backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/dT into ``T.grad`` for every reachable T with requires_grad."""
    if loss.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    adjoint = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = adjoint.pop(id(node), None)
        if g is None:
            continue
        node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            adjoint[key] = pg if key not in adjoint else adjoint[key] + pg


# --------------------------------------------------------------------- Adam

class Adam:
    """Bias-corrected Adam. Clears every parameter's gradient after a step."""

    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, beta1: float = 0.5,
                 beta2: float = 0.9, epsilon: float = 1e-8):
        self.params = list(params)
        self.learning_rate = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.step_count = 0
        self.first_moment = [np.zeros_like(p.data) for p in self.params]
        self.second_moment = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        missing = [p.name or i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ValueError(f"adam_step: parameters without gradient: {missing}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        step_size = self.learning_rate / bc1
        for p, m, v in zip(self.params, self.first_moment, self.second_moment):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            denom = v / bc2
            np.sqrt(denom, out=denom)
            denom += self.epsilon
            p.data -= step_size * m / denom
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def adam_step(params: Sequence[Tensor], state: Adam) -> None:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ValueError("adam_step: parameter list does not match optimiser state")
    state.step()


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of ``x`` (mutated in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad
