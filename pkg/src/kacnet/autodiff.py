"""A small dense-tensor engine with reverse-mode automatic differentiation.

Every tensor wraps a float64 numpy array.  Operations on tensors that
require gradients record a :class:`Node` pointing at their parents; the
resulting DAG is the tape.  :func:`backward` orders the tape topologically
starting at a scalar loss and walks it once in reverse, accumulating
gradients additively where a value fans out.

The tape is rebuilt on every forward pass, which keeps variable-length
sequences trivial.  Gradient recording can be disabled per thread with
:func:`no_grad`.

Shape rules per primitive:

* ``add``/``sub``/``mul``: numpy broadcasting.
* ``matmul``: operands of rank 1 or 2 with matching inner dimension.
* ``concat``: equal shapes except along the joined axis.
* ``softmax``/``log_softmax``: non-empty reduction axis.
* ``segment_sum``/``segment_softmax``: first axis indexed by segment ids.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from kacnet.errors import ContractError, DimensionError, DomainError, NumericError

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


def current_dtype():
    return getattr(_state, "dtype", np.float64)


@contextmanager
def precision(dtype):
    """Evaluate new tensors in ``dtype`` on the current thread.

    Only finite-difference oracles use this, to push their rounding noise
    well below float64's.
    """
    prev = current_dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = prev


@contextmanager
def no_grad():
    """Suspend tape recording on the current thread."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    op: str
    parents: tuple
    backward: Callable[[np.ndarray], tuple]
    extra: dict = field(default_factory=dict)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=current_dtype())
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if type(x) is Tensor else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(op: str, data: np.ndarray, parents: Sequence[Tensor], backward, **extra) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = Node(op, tuple(parents), backward, extra)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(op: str, fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", _binary("add", np.add, a, b), (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", _binary("sub", np.subtract, a, b), (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make("mul", _binary("mul", np.multiply, a, b), (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 1 and b.ndim == 2:
            return b.data @ g, np.outer(a.data, g)
        if a.ndim == 2 and b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g * b.data, g * a.data

    return _make("matmul", a.data @ b.data, (a, b), backward)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected rank 2, got shape {a.shape}")
    return _make("transpose", a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _make("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def _is_fancy(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise DimensionError(f"getitem: {exc} for shape {a.shape}") from None

    fancy = _is_fancy(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _make("getitem", np.asarray(out), (a,), backward)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat: no operands")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} do not align on axis {axis}") from None
    ax = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make("concat", out, ts, backward)


# ---------------------------------------------------------------- elementwise


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows and keeps both tails accurate.
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0, e) / (1.0 + e)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log: argument must be strictly positive")
    return _make("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent < 0 and np.any(a.data == 0):
        raise DomainError("power: zero raised to a negative exponent")
    y = a.data**exponent
    return _make("power", y, (a,), lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _make("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def smooth_l1(a) -> Tensor:
    """0.5 x^2 inside the unit interval, |x| - 0.5 outside it."""
    a = as_tensor(a)
    x = a.data
    inner = np.abs(x) < 1.0
    y = np.where(inner, 0.5 * x * x, np.abs(x) - 0.5)
    slope = np.where(inner, x, np.sign(x))
    return _make("smooth_l1", y, (a,), lambda g: (g * slope,))


# ---------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make("sum", np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    if count == 0:
        raise DomainError("mean: empty reduction")
    out = a.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape) / count,)

    return _make("mean", np.asarray(out), (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DomainError(f"softmax: empty axis {axis} for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make("softmax", y, (a,), backward)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DomainError(f"log_softmax: empty axis {axis} for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _make("log_softmax", y, (a,), backward)


def segment_sum(a, segments: np.ndarray, n_segments: int) -> Tensor:
    """Sum rows of ``a`` that share a segment id; output has ``n_segments`` rows."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    if a.ndim == 0 or segments.shape != a.shape[:1]:
        raise DimensionError(f"segment_sum: {segments.shape} segment ids for shape {a.shape}")
    out = np.zeros((n_segments,) + a.shape[1:], dtype=a.data.dtype)
    np.add.at(out, segments, a.data)
    return _make("segment_sum", out, (a,), lambda g: (g[segments],))


def segment_softmax(a, segments: np.ndarray, n_segments: int) -> Tensor:
    """Softmax of a vector computed independently within each segment."""
    a = as_tensor(a)
    segments = np.asarray(segments, dtype=np.intp)
    if a.ndim != 1 or segments.shape != a.shape:
        raise DimensionError(f"segment_softmax: {segments.shape} segment ids for shape {a.shape}")
    counts = np.bincount(segments, minlength=n_segments)
    if np.any(counts == 0):
        raise DomainError("segment_softmax: empty segment")
    peak = np.full(n_segments, -np.inf, dtype=a.data.dtype)
    np.maximum.at(peak, segments, a.data)
    e = np.exp(a.data - peak[segments])
    total = np.zeros(n_segments, dtype=a.data.dtype)
    np.add.at(total, segments, e)
    y = e / total[segments]

    def backward(g):
        dot = np.zeros(n_segments)
        np.add.at(dot, segments, g * y)
        return (y * (g - dot[segments]),)

    return _make("segment_softmax", y, (a,), backward)


PRIMITIVES: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "neg": neg,
    "matmul": matmul,
    "transpose": transpose,
    "concat": concat,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "abs": absolute,
    "power": power,
    "smooth_l1": smooth_l1,
    "sum": tsum,
    "mean": mean,
    "softmax": softmax,
    "log_softmax": log_softmax,
}


def forward_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ContractError(f"unknown primitive {kind!r}") from None
    if kind == "concat":
        return fn(inputs, **kwargs)
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------- backward


def tape(loss: Tensor) -> list[Tensor]:
    """Tensors reachable from ``loss`` in topological order (parents first)."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for p in t.node.parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] = ()) -> dict[Tensor, np.ndarray]:
    """Backpropagate from a scalar loss.

    Returns a map from every leaf tensor that requires grad (plus anything in
    ``params``) to its gradient; each such tensor's ``.grad`` is overwritten.
    Parameters in ``params`` that the loss does not reach get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for t in reversed(tape(loss)):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            if t.requires_grad:
                leaves[t] = g
            continue
        for parent, pg in zip(t.node.parents, t.node.backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = np.array(pg, dtype=np.float64).reshape(parent.shape)
    for p in params:
        if p not in leaves:
            leaves[p] = np.zeros_like(p.data)
    for t, g in leaves.items():
        t.grad = g
    return leaves


def finite_difference_check(f: Callable[..., Tensor], x, h: float = 1e-5, oracle_dtype=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` receives the tensors in ``x`` positionally and must return a
    scalar.  Each coordinate is perturbed in place and restored afterwards.
    The error per coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.

    With ``oracle_dtype`` (e.g. ``np.longdouble``) the perturbed forward
    passes run in that precision; the analytic gradient is unaffected.
    """
    if h <= 0:
        raise ContractError("finite_difference_check: step must be positive")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    flags = [t.requires_grad for t in inputs]
    originals = [t.data for t in inputs]
    dtype = oracle_dtype or np.float64
    for t in inputs:
        t.requires_grad = True
    try:
        out = f(*inputs)
        if not np.all(np.isfinite(out.data)):
            raise NumericError("finite_difference_check: non-finite function value")
        analytic = backward(out, inputs)
        worst = 0.0
        with no_grad(), precision(dtype):
            for t in inputs:
                t.data = t.data.astype(dtype)
            for t in inputs:
                flat = t.data.reshape(-1)
                grad = analytic[t].reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    fp = f(*inputs).data.reshape(-1)[0]
                    flat[i] = orig - h
                    fm = f(*inputs).data.reshape(-1)[0]
                    flat[i] = orig
                    numeric = float((fp - fm) / (2 * dtype(h)))
                    if not (np.isfinite(numeric) and np.isfinite(grad[i])):
                        raise NumericError(f"finite_difference_check: non-finite gradient at {t.name or 'input'}[{i}]")
                    err = abs(grad[i] - numeric) / max(1e-8, abs(grad[i]) + abs(numeric))
                    worst = max(worst, err)
        return worst
    finally:
        for t, flag, data in zip(inputs, flags, originals):
            t.requires_grad = flag
            t.data = data
