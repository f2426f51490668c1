"""Reverse-mode differentiation over a small, fixed set of array ops.

Every op records a backward rule written in terms of other recorded ops, so
differentiating with ``create_graph=True`` yields a graph that can itself be
differentiated. Ops whose backward rule drops to raw numpy are flagged as
first-order only and refuse to take part in a second-order request.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

DTYPE = np.float64

__all__ = [
    "Tensor", "EngineError", "ShapeError", "NonFiniteError", "NotTwiceDifferentiableError",
    "tensor", "no_grad", "enable_grad", "grad", "custom_op",
    "add", "sub", "mul", "div", "neg", "power", "matmul", "exp", "log", "tanh", "sqrt",
    "sum", "mean", "reshape", "transpose", "swapaxes", "broadcast_to", "getitem", "concat",
    "softmax", "log_softmax", "gelu", "gelu_prime", "layer_norm", "l2norm", "topk_select",
    "evaluate", "gradient", "second_gradient", "finite_difference_check",
    "second_order_check", "FDReport",
]


class EngineError(Exception):
    pass


class ShapeError(EngineError, ValueError):
    pass


class NonFiniteError(EngineError, FloatingPointError):
    pass


class NotTwiceDifferentiableError(EngineError):
    pass


_state = threading.local()
_creation = itertools.count()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled: bool):
    prev = _grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops ops from being recorded."""
    return _grad_mode(False)


def enable_grad():
    """Re-enable recording inside a ``no_grad`` block (IG needs gradients even for values)."""
    return _grad_mode(True)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "twice", "seq")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.twice = True
        self.seq = next(_creation)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op, twice=True) -> Tensor:
    """Create an op output; records the backward rule only when it matters."""
    data = np.asarray(data, dtype=DTYPE)
    # a single non-finite entry makes the sum non-finite; cheaper than isfinite().all()
    if not np.isfinite(np.add.reduce(data, axis=None)):
        raise NonFiniteError(f"non-finite value produced by op '{op}'")
    out = Tensor(data)
    out.op = op
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward
        out.twice = twice
    return out


def custom_op(fn: Callable[..., np.ndarray], vjp: Callable, *inputs, name="custom", twice=False) -> Tensor:
    """Wrap a numpy function with a user-supplied vector-Jacobian product.

    ``vjp(g, *input_arrays)`` returns one numpy array per input. Custom ops are
    first-order only unless ``twice=True`` and ``vjp`` is built from Tensor ops.
    """
    inputs = [_wrap(x) for x in inputs]
    out = fn(*[x.data for x in inputs])

    def backward(g, needs):
        if twice:
            return vjp(g, *inputs)
        res = vjp(g.data, *[x.data for x in inputs])
        return tuple(Tensor(r) for r in res)

    return _make(out, inputs, backward, name, twice=twice)


# --- broadcasting helpers -------------------------------------------------

def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise ShapeError(f"{op}: incompatible shapes {a} and {b}") from exc


def unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = sum(g, axis=axes, keepdims=True)
    return g


# --- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        _broadcast_shape(a.shape, b.shape, "add")

    def backward(g, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(g, b.shape) if needs[1] else None)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        _broadcast_shape(a.shape, b.shape, "sub")

    def backward(g, needs):
        return (unbroadcast(g, a.shape) if needs[0] else None,
                unbroadcast(neg(g), b.shape) if needs[1] else None)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        _broadcast_shape(a.shape, b.shape, "mul")

    def backward(g, needs):
        return (unbroadcast(mul(g, b), a.shape) if needs[0] else None,
                unbroadcast(mul(g, a), b.shape) if needs[1] else None)

    return _make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise NonFiniteError("div: division by zero")

    def backward(g, needs):
        ga = unbroadcast(div(g, b), a.shape) if needs[0] else None
        gb = unbroadcast(neg(div(mul(g, a), mul(b, b))), b.shape) if needs[1] else None
        return ga, gb

    return _make(a.data / b.data, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g, needs: (neg(g),), "neg")


def power(a, p: float) -> Tensor:
    a = _wrap(a)
    p = float(p)
    out = _fast_pow(a.data, p)

    def backward(g, needs):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(out, (a,), backward, "pow")


def _fast_pow(x: np.ndarray, p: float) -> np.ndarray:
    # generic float pow is ~100x slower than these special cases
    with np.errstate(all="ignore"):
        if p == 1.0:
            return x.copy()
        if p == 2.0:
            return x * x
        if p == 0.0:
            return np.ones_like(x)
        if p == -0.5:
            return 1.0 / np.sqrt(x)
        if p == -1.5:
            return 1.0 / (x * np.sqrt(x))
        if p == 0.5:
            return np.sqrt(x)
        return x ** p


def exp(a) -> Tensor:
    a = _wrap(a)
    out = None

    def backward(g, needs):
        return (mul(g, out),)

    with np.errstate(over="ignore"):
        out = _make(np.exp(a.data), (a,), backward, "exp")
    return out


def log(a) -> Tensor:
    a = _wrap(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g, needs: (div(g, a),), "log")


def tanh(a) -> Tensor:
    a = _wrap(a)
    out = None

    def backward(g, needs):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _make(np.tanh(a.data), (a,), backward, "tanh")
    return out


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = None

    def backward(g, needs):
        return (div(mul(g, 0.5), out),)

    with np.errstate(invalid="ignore"):
        out = _make(np.sqrt(a.data), (a,), backward, "sqrt")
    return out


# --- reductions and shape ops ---------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    out = np.sum(a.data, axis=axes, keepdims=keepdims)

    def backward(g, needs):
        if not keepdims:
            kept = list(a.shape)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        return (broadcast_to(g, a.shape),)

    return _make(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return mul(sum(a, axes, keepdims), 1.0 / count)


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g, needs: (unbroadcast(g, a.shape),), "broadcast_to")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from exc
    return _make(out, (a,), lambda g, needs: (reshape(g, a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g, needs: (transpose(g, inverse),), "transpose")


def swapaxes(a, ax1=-1, ax2=-2) -> Tensor:
    a = _wrap(a)
    axes = list(range(a.ndim))
    axes[ax1], axes[ax2] = axes[ax2], axes[ax1]
    return transpose(a, axes)


def getitem(a, idx) -> Tensor:
    """Indexing, including integer-array gathers (embedding lookup)."""
    a = _wrap(a)
    out = a.data[idx]
    return _make(out, (a,), lambda g, needs: (_scatter(g, idx, a.shape),), "getitem")


def _scatter(g: Tensor, idx, shape) -> Tensor:
    # adjoint of getitem; np.add.at accumulates repeated indices
    buf = np.zeros(shape, dtype=DTYPE)
    np.add.at(buf, idx, g.data)
    return _make(buf, (g,), lambda gg, needs: (getitem(gg, idx),), "scatter")


def concat(tensors: Sequence, axis=-1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    ax = axis % ts[0].ndim
    try:
        out = np.concatenate([t.data for t in ts], axis=ax)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from exc
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g, needs):
        res = []
        for i, need in enumerate(needs):
            if not need:
                res.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append(getitem(g, tuple(sl)))
        return tuple(res)

    return _make(out, ts, backward, "concat")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    _broadcast_shape(a.shape[:-2], b.shape[:-2], "matmul")

    def backward(g, needs):
        ga = unbroadcast(matmul(g, swapaxes(b)), a.shape) if needs[0] else None
        gb = unbroadcast(matmul(swapaxes(a), g), b.shape) if needs[1] else None
        return ga, gb

    return _make(np.matmul(a.data, b.data), (a, b), backward, "matmul")


# --- composite-but-primitive ops ------------------------------------------

def softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = None

    def backward(g, needs):
        inner = sum(mul(g, out), axis=axis, keepdims=True)
        return (mul(out, sub(g, inner)),)

    out = _make(e / np.sum(e, axis=axis, keepdims=True), (a,), backward, "softmax")
    return out


def log_softmax(a, axis=-1) -> Tensor:
    a = _wrap(a)
    z = a.data - np.max(a.data, axis=axis, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=axis, keepdims=True))
    out = None

    def backward(g, needs):
        total = sum(g, axis=axis, keepdims=True)
        return (sub(g, mul(exp(out), total)),)

    out = _make(z - lse, (a,), backward, "log_softmax")
    return out


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _gelu_parts(x):
    u1 = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    t = np.tanh(_GELU_C * (x + _GELU_A * (x * x * x)))
    return t, u1


def gelu(a) -> Tensor:
    """GELU, tanh approximation, with an exact derivative registered."""
    a = _wrap(a)
    x = a.data
    t, _ = _gelu_parts(x)
    return _make(0.5 * x * (1.0 + t), (a,), lambda g, needs: (mul(g, gelu_prime(a)),), "gelu")


def gelu_prime(a) -> Tensor:
    """Derivative of the tanh-approximate GELU; its own derivative is closed form.

    That makes gelu twice differentiable. A third derivative is not provided.
    """
    a = _wrap(a)
    x = a.data
    t, u1 = _gelu_parts(x)
    sech2 = 1.0 - t * t
    out = 0.5 * (1.0 + t) + 0.5 * x * sech2 * u1

    def backward(g, needs):
        u2 = 6.0 * _GELU_C * _GELU_A * x
        second = sech2 * (u1 + 0.5 * x * (u2 - 2.0 * t * u1 * u1))
        return (Tensor(g.data * second),)

    return _make(out, (a,), backward, "gelu_prime", twice=False)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x = _wrap(x)
    mu = mean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = mean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def l2norm(a, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    a = _wrap(a)
    norm = np.sqrt(np.sum(a.data * a.data, axis=axis, keepdims=True))
    zero = norm == 0.0
    keep = (~zero).astype(DTYPE)
    out = norm if keepdims else np.squeeze(norm, axis=axis)
    result = None

    def backward(g, needs):
        n = result if keepdims else reshape(result, norm.shape)
        gk = g if keepdims else reshape(g, norm.shape)
        # n + zero keeps the divisor nonzero without touching live entries
        denom = add(n, zero.astype(DTYPE))
        return (mul(div(mul(gk, a), denom), keep),)

    result = _make(out, (a,), backward, "l2norm")
    return result


def topk_select(a, k: int, axis=-1) -> Tensor:
    """Keep the k largest-magnitude entries along ``axis`` (ties: lower index).

    First-order only: the selection mask is treated as a constant and the
    backward rule runs in raw numpy.
    """
    a = _wrap(a)
    n = a.shape[axis]
    if not 1 <= k <= n:
        raise ValueError(f"topk_select: k={k} outside [1, {n}]")
    order = np.argsort(-np.abs(a.data), axis=axis, kind="stable")
    ranks = np.argsort(order, axis=axis, kind="stable")
    mask = (ranks < k).astype(DTYPE)
    return _make(a.data * mask, (a,), lambda g, needs: (Tensor(g.data * mask),),
                 "topk_select", twice=False)


# --- differentiation ------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs: Sequence[Tensor], grad_output=None,
         create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    Inputs may be interior nodes. Unreached inputs get zeros. With
    ``create_graph`` the returned tensors are themselves differentiable.
    """
    inputs = list(inputs)
    if grad_output is None:
        if output.data.size != 1:
            raise ShapeError("grad: output must be scalar when grad_output is omitted")
        seed = Tensor(np.ones_like(output.data))
    else:
        seed = _wrap(grad_output)
        if seed.shape != output.shape:
            raise ShapeError("grad: grad_output shape differs from output")
    input_ids = {id(t) for t in inputs}
    # Creation order is a valid topological order; using it (rather than DFS
    # order) makes gradient accumulation order independent of unrelated
    # branches hanging off the same nodes.
    topo = sorted(_toposort(output), key=lambda t: t.seq) if output.requires_grad else []
    needed = set()
    for node in topo:
        if id(node) in input_ids or any(id(p) in needed for p in node.parents):
            needed.add(id(node))
    grads: dict[int, Tensor] = {}
    if id(output) in needed:
        grads[id(output)] = seed
    with _grad_mode(create_graph):
        for node in reversed(topo):
            g = grads.get(id(node))
            if g is None or node.backward_fn is None:
                continue
            needs = tuple(id(p) in needed for p in node.parents)
            if not any(needs):
                continue
            if create_graph and not node.twice:
                raise NotTwiceDifferentiableError(
                    f"op '{node.op}' has no registered second derivative")
            pgrads = node.backward_fn(g, needs)
            for p, pg, need in zip(node.parents, pgrads, needs):
                if not need or pg is None:
                    continue
                key = id(p)
                grads[key] = add(grads[key], pg) if key in grads else pg
    result = []
    for t in inputs:
        g = grads.get(id(t))
        result.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return result


# --- functional front end -------------------------------------------------
# A "graph" is a callable taking Tensor keyword arguments (the leaves) and
# returning a Tensor; the bindings map leaf names to arrays.

def _leaves(bindings: Mapping[str, np.ndarray], wrt=()) -> dict[str, Tensor]:
    return {k: Tensor(np.array(v, dtype=DTYPE), requires_grad=k in wrt) for k, v in bindings.items()}


def evaluate(graph: Callable[..., Tensor], bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    with no_grad():
        out = graph(**_leaves(bindings))
    return out.data.copy()


def gradient(graph: Callable[..., Tensor], bindings: Mapping[str, np.ndarray],
             wrt: Sequence[str]) -> dict[str, np.ndarray]:
    leaves = _leaves(bindings, wrt)
    out = graph(**leaves)
    gs = grad(out, [leaves[k] for k in wrt])
    return {k: g.data.copy() for k, g in zip(wrt, gs)}


def second_gradient(graph: Callable[..., Tensor], bindings: Mapping[str, np.ndarray],
                    inner_wrt: Sequence[str], reduce: Callable[..., Tensor],
                    wrt: Sequence[str]) -> dict[str, np.ndarray]:
    """d/d(wrt) of ``reduce(*grads)``, where grads = d graph / d(inner_wrt)."""
    leaves = _leaves(bindings, set(inner_wrt) | set(wrt))
    out = graph(**leaves)
    inner = grad(out, [leaves[k] for k in inner_wrt], create_graph=True)
    scalar = reduce(*inner)
    gs = grad(scalar, [leaves[k] for k in wrt])
    return {k: g.data.copy() for k, g in zip(wrt, gs)}


@dataclass
class FDReport:
    leaf: str
    max_rel_error: float
    rel_errors: np.ndarray = field(repr=False)
    analytic: np.ndarray = field(repr=False)
    numeric: np.ndarray = field(repr=False)

    @property
    def ok(self) -> bool:
        return self.max_rel_error < 1e-4


def finite_difference_check(graph: Callable[..., Tensor], bindings: Mapping[str, np.ndarray],
                            leaf: str, step: float = 1e-5, analytic: np.ndarray | None = None,
                            floor: float = 1e-6) -> FDReport:
    """Compare the analytic gradient of a scalar graph with central differences.

    Per-element error is ``|a - n| / max(|a|, |n|, floor)``. Never raises on a
    mismatch; a graph that itself fails to evaluate yields ``inf``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    bindings = {k: np.array(v, dtype=DTYPE) for k, v in bindings.items()}
    try:
        if analytic is None:
            analytic = gradient(graph, bindings, [leaf])[leaf]
        base = bindings[leaf]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy()
                pert.reshape(-1)[i] += sgn * step
                vals.append(float(np.sum(evaluate(graph, {**bindings, leaf: pert}))))
            flat[i] = (vals[0] - vals[1]) / (2.0 * step)
    except EngineError:
        nan = np.full_like(bindings[leaf], np.nan)
        return FDReport(leaf, float("inf"), nan, nan, nan)
    analytic = np.asarray(analytic, dtype=DTYPE)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return FDReport(leaf, float(rel.max()) if rel.size else 0.0, rel, analytic, numeric)


def second_order_check(graph: Callable[..., Tensor], bindings: Mapping[str, np.ndarray],
                       inner_wrt: Sequence[str], reduce: Callable[..., Tensor], leaf: str,
                       step: float = 1e-5, floor: float = 1e-6) -> FDReport:
    """Check ``second_gradient`` against central differences of first gradients.

    The numeric side only ever calls the first-order ``gradient``; ``reduce``
    is applied to those gradients as plain (unrecorded) arrays.
    """
    bindings = {k: np.array(v, dtype=DTYPE) for k, v in bindings.items()}

    def reduced(b):
        gs = gradient(graph, b, inner_wrt)
        with no_grad():
            return float(np.sum(reduce(*[Tensor(gs[k]) for k in inner_wrt]).data))

    try:
        analytic = second_gradient(graph, bindings, inner_wrt, reduce, [leaf])[leaf]
        base = bindings[leaf]
        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        for i in range(base.size):
            vals = []
            for sgn in (1.0, -1.0):
                pert = base.copy()
                pert.reshape(-1)[i] += sgn * step
                vals.append(reduced({**bindings, leaf: pert}))
            flat[i] = (vals[0] - vals[1]) / (2.0 * step)
    except EngineError:
        nan = np.full_like(bindings[leaf], np.nan)
        return FDReport(leaf, float("inf"), nan, nan, nan)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = np.abs(analytic - numeric) / denom
    return FDReport(leaf, float(rel.max()) if rel.size else 0.0, rel, analytic, numeric)
