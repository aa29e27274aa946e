"""Minimal reverse-mode automatic differentiation over numpy arrays, plus Adam.

The graph is a dynamic tape: every primitive applied to a tensor that
requires gradients records a node holding its inputs and a closure mapping
the output gradient to input gradients. ``backward`` walks the graph once in
reverse topological order.

Broadcasting is deliberately narrow: two operands must have equal shapes,
one of them must be a scalar, or the smaller shape must be a suffix of the
larger one (broadcast over leading batch dimensions). Anything else has to
be written explicitly, e.g. with :func:`expand_last`.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_STRICT = False
_GRAD_ENABLED = True


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def get_default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating point type."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def set_strict(flag: bool) -> None:
    global _STRICT
    _STRICT = bool(flag)


def is_strict() -> bool:
    return _STRICT


@contextlib.contextmanager
def strict_mode(flag: bool = True):
    prev = _STRICT
    set_strict(flag)
    try:
        yield
    finally:
        set_strict(prev)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording. Forward values are unaffected."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@dataclass
class Node:
    op: str
    parents: tuple
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """Dense array with an optional gradient and graph node."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DEFAULT_DTYPE
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
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
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(op: str, tensors: Iterable[Tensor]) -> None:
    for i, t in enumerate(tensors):
        if not np.all(np.isfinite(t.data)):
            raise NonFiniteError(f"{op}: input {i} contains non-finite values")


def _make(op: str, data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    out.node = Node(op, parents, backward_fn) if needs else None
    return out


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    if a == b:
        return a
    if len(b) == 0 or (len(b) == 1 and b[0] == 1):
        return a
    if len(a) == 0 or (len(a) == 1 and a[0] == 1):
        return b
    if len(b) < len(a) and a[len(a) - len(b):] == b:
        return a
    if len(a) < len(b) and b[len(b) - len(a):] == a:
        return b
    raise ShapeError(f"{op}: incompatible shapes {a} and {b}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    size = int(np.prod(shape)) if shape else 1
    if size == 1:
        return grad.sum().reshape(shape)
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead))).reshape(shape)


# --- elementwise binary -------------------------------------------------------


def _binary_prep(op, a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(op, a.shape, b.shape)
    if _STRICT:
        _check_finite(op, (a, b))
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_prep("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _binary_prep("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _binary_prep("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _binary_prep("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make("div", out, (a, b), bw)


def sqdiff(a, b) -> Tensor:
    """Elementwise (a - b)**2."""
    a, b = _binary_prep("sqdiff", a, b)
    diff = a.data - b.data

    def bw(g):
        ga = 2.0 * g * diff
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga, b.shape)

    return _make("sqdiff", diff * diff, (a, b), bw)


# --- elementwise unary --------------------------------------------------------


def _unary_prep(op, x):
    x = as_tensor(x)
    if _STRICT:
        _check_finite(op, (x,))
    return x


def neg(x) -> Tensor:
    x = _unary_prep("neg", x)
    return _make("neg", -x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = _unary_prep("exp", x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = _unary_prep("log", x)
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def sin(x) -> Tensor:
    x = _unary_prep("sin", x)
    xd = x.data
    return _make("sin", np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


def cos(x) -> Tensor:
    x = _unary_prep("cos", x)
    xd = x.data
    return _make("cos", np.cos(xd), (x,), lambda g: (-g * np.sin(xd),))


def relu(x) -> Tensor:
    x = _unary_prep("relu", x)
    out = np.maximum(x.data, x.dtype.type(0))
    mask = out > 0
    return _make("relu", out, (x,), lambda g: (g * mask,))


def sigmoid(x) -> Tensor:
    x = _unary_prep("sigmoid", x)
    xd = x.data
    # split by sign to avoid overflow in exp
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    e = np.exp(xd[~pos])
    out[~pos] = e / (1.0 + e)
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def scale(x, c: float) -> Tensor:
    """Multiply by a python scalar without creating a constant tensor."""
    x = _unary_prep("scale", x)
    c = x.dtype.type(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


# --- linear algebra and structure ------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim not in (1, 2) or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if _STRICT:
        _check_finite("matmul", (a, b))
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def bw(g):
        ga = g @ bd.T if need_a else None
        if not need_b:
            return ga, None
        return ga, (np.outer(ad, g) if ad.ndim == 1 else ad.T @ g)

    return _make("matmul", ad @ bd, (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no inputs")
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: incompatible shapes {ts[0].shape} and {t.shape}")
    if _STRICT:
        _check_finite("concat", ts)
    sizes = [t.shape[ax] for t in ts]
    bounds = np.cumsum([0] + sizes)

    needs = [t.requires_grad for t in ts]

    def bw(g):
        idx = [slice(None)] * g.ndim
        out = []
        for lo, hi, need in zip(bounds[:-1], bounds[1:], needs):
            idx[ax] = slice(lo, hi)
            out.append(g[tuple(idx)] if need else None)
        return tuple(out)

    return _make("concat", np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw)


def slice_(x, idx) -> Tensor:
    """Basic or integer-array indexing; gradient scatters back with accumulation."""
    x = _unary_prep("slice", x)
    shape, dtype = x.shape, x.dtype
    try:
        out = x.data[idx]
    except IndexError as exc:
        raise ShapeError(f"slice: index {idx!r} invalid for shape {shape}") from exc

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make("slice", np.array(out, copy=True), (x,), bw)


def reshape(x, shape) -> Tensor:
    x = _unary_prep("reshape", x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from exc
    return _make("reshape", out, (x,), lambda g: (g.reshape(old),))


def expand_last(x, k: int) -> Tensor:
    """Repeat ``x`` along a new trailing axis of size ``k``."""
    x = _unary_prep("expand_last", x)
    out = np.repeat(x.data[..., None], k, axis=-1)
    return _make("expand_last", out, (x,), lambda g: (g.sum(axis=-1),))


def sum_(x, axis=None) -> Tensor:
    x = _unary_prep("sum", x)
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(x.data.sum(axis=axis)), (x,), bw)


def mean(x, axis=None) -> Tensor:
    x = _unary_prep("mean", x)
    shape = x.shape
    count = x.size if axis is None else shape[axis]

    def bw(g):
        g = g / count
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("mean", np.asarray(x.data.mean(axis=axis)), (x,), bw)


def cumsum_exclusive(x) -> Tensor:
    """Exclusive prefix sum along the last axis: out[..., i] = sum_{j<i} x[..., j]."""
    x = _unary_prep("cumsum_exclusive", x)
    inc = np.cumsum(x.data, axis=-1)
    out = np.concatenate([np.zeros_like(inc[..., :1]), inc[..., :-1]], axis=-1)

    def bw(g):
        # d out_i / d x_j = 1 for j < i  ->  grad_j = sum_{i>j} g_i
        rev = np.cumsum(g[..., ::-1], axis=-1)[..., ::-1]
        return (np.concatenate([rev[..., 1:], np.zeros_like(rev[..., :1])], axis=-1),)

    return _make("cumsum_exclusive", out, (x,), bw)


def custom_op(name: str, forward: Callable, backward_rule: Callable, *inputs) -> Tensor:
    """Apply a user-defined primitive.

    ``forward`` maps input arrays to an output array; ``backward_rule`` maps
    ``(grad_out, *input_arrays)`` to a tuple of input gradients.
    """
    ts = tuple(as_tensor(t) for t in inputs)
    if _STRICT:
        _check_finite(name, ts)
    arrays = [t.data for t in ts]
    out = np.asarray(forward(*arrays))

    def bw(g):
        return tuple(backward_rule(g, *arrays))

    return _make(name, out, ts, bw)


PRIMITIVES: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "log": log,
    "sin": sin,
    "cos": cos,
    "relu": relu,
    "sigmoid": sigmoid,
    "concat": lambda *xs, axis=-1: concat(xs, axis=axis),
    "slice": slice_,
    "sum": sum_,
    "mean": mean,
    "sqdiff": sqdiff,
    "cumsum_exclusive": cumsum_exclusive,
    "expand_last": expand_last,
    "reshape": reshape,
}


def primitive_forward(op_kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch a primitive by name."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# --- backward -------------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every reachable leaf that requires gradients.

    Gradients accumulate into existing ``.grad`` arrays of leaves.
    """
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in reversed(order):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        if t.node is None:
            t.grad = g.astype(t.dtype, copy=False) if t.grad is None else t.grad + g
            continue
        in_grads = t.node.backward_fn(g)
        for p, pg in zip(t.node.parents, in_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        # free graph memory once consumed
        t.node = None


# --- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4,
               tol: float = 1e-3, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``f`` is re-evaluated from scratch for every perturbation and must return
    a scalar tensor. The error per parameter is the largest elementwise
    ``|a - n| / max(|a|, |n|, floor * scale)`` where ``scale`` is the largest
    gradient magnitude of that parameter, so entries that are numerically
    zero do not dominate.
    """
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("grad_check requires 64-bit parameters")
    for p in params:
        p.grad = None
    out = f()
    if out.size != 1:
        raise ShapeError(f"grad_check: f must return a scalar, got shape {out.shape}")
    backward(out)
    report: dict[str, float] = {}
    for k, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().item()
                flat[i] = orig - h
                fm = f().item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
        mag = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), max(floor * mag, 1e-12))
        err = float((np.abs(analytic - numeric) / denom).max(initial=0.0))
        report[p.name or f"param{k}"] = err
    for p in params:
        p.grad = None
    return GradCheckReport(report, tol)


# --- optimisation -------------------------------------------------------------------


@dataclass
class AdamState:
    learning_rate: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def _key(p: Tensor) -> str:
    if p.name is None:
        raise ValueError("adam_step: parameters must be named")
    return p.name


def adam_step(params: Sequence[Tensor], state: AdamState) -> None:
    """One Adam update with bias correction; zeroes gradients afterwards."""
    for p in params:
        if p.grad is None:
            raise ValueError(f"adam_step: parameter {p.name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    lr = state.learning_rate
    for p in params:
        key = _key(p)
        g = p.grad
        m = state.first_moment.get(key)
        v = state.second_moment.get(key)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"adam_step: state for {key!r} has shape {m.shape}, param {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[key] = m.astype(p.dtype, copy=False)
        state.second_moment[key] = v.astype(p.dtype, copy=False)
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)
        p.grad = None


@dataclass(frozen=True)
class DecaySchedule:
    lr_start: float = 5e-4
    lr_end: float = 5e-6
    span: int = 50_000

    def __post_init__(self):
        if self.lr_start <= 0 or self.lr_end <= 0:
            raise ValueError("learning rate bounds must be positive")
        if self.span <= 0:
            raise ValueError("decay span must be positive")

    def __call__(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be non-negative")
        return self.lr_start * (self.lr_end / self.lr_start) ** (iteration / self.span)


def set_learning_rate(state: AdamState, iteration: int, schedule: DecaySchedule) -> float:
    lr = schedule(iteration)
    state.learning_rate = lr
    return lr


def check_finite_loss(value: float, what: str = "loss") -> None:
    """Strict mode raises on a non-finite loss; otherwise it only warns."""
    if math.isfinite(value):
        return
    if _STRICT:
        raise NonFiniteError(f"{what} is not finite ({value})")
    logger.warning("%s is not finite (%s)", what, value)
