"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records primitive applications eagerly: every call computes
its forward value immediately and appends a node.  :meth:`Tape.backward`
walks the nodes in reverse index order and returns a fresh gradient map, so
calling it twice on the same tape gives identical results.

Nodes that are not ancestors of the loss get no entry in the gradient map
(absent, not zero).  Constant leaves (``requires_grad=False``) never get an
entry either.

Tensors are plain ``numpy.ndarray`` values of dtype float64; the shape/data
pair of the array is the tensor.
"""

from __future__ import annotations

import inspect
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

Tensor = np.ndarray

EPS = 1e-12
LOG_EPS = float(np.log(EPS))
LN_EPS = 1e-5
NEG_INF = -1e9


class ShapeError(ValueError):
    pass


def as_tensor(x) -> Tensor:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: Tensor, shape: tuple) -> Tensor:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# primitives: forward(values, **attrs) -> (out, ctx); backward(g, values, out, ctx, **attrs)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable
    backward: Callable
    arity: int | None = None
    takes_needs: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def primitive(name: str, arity: int | None = None):
    def register(fns):
        fwd, bwd = fns
        takes_needs = "needs" in inspect.signature(bwd).parameters
        PRIMITIVES[name] = Primitive(name, fwd, bwd, arity, takes_needs)
        return fns

    return register


def _add_fwd(a, b):
    _broadcast_shape("add", a, b)
    return a + b, None


def _add_bwd(g, vals, out, ctx, needs=(True, True)):
    a, b = vals
    return (
        _unbroadcast(g, a.shape) if needs[0] else None,
        _unbroadcast(g, b.shape) if needs[1] else None,
    )


primitive("add", 2)((_add_fwd, _add_bwd))


def _mul_fwd(a, b):
    _broadcast_shape("multiply", a, b)
    return a * b, None


def _mul_bwd(g, vals, out, ctx, needs=(True, True)):
    a, b = vals
    return (
        _unbroadcast(g * b, a.shape) if needs[0] else None,
        _unbroadcast(g * a, b.shape) if needs[1] else None,
    )


primitive("multiply", 2)((_mul_fwd, _mul_bwd))


def _matmul_fwd(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None
    if a.ndim > 2 and b.ndim == 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(*a.shape[:-1], b.shape[-1]), None
    return np.matmul(a, b), None


def _matmul_bwd(g, vals, out, ctx, needs=(True, True)):
    a, b = vals
    ga = gb = None
    if needs[0]:
        if a.ndim > 2 and b.ndim == 2:
            ga = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
        else:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
    if needs[1]:
        if a.ndim > 2 and b.ndim == 2:
            # (..., n, k) x (k, m): fold batch dims into one big product
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
    return ga, gb


primitive("matmul", 2)((_matmul_fwd, _matmul_bwd))


def _embed_fwd(table, *, ids):
    ids = np.asarray(ids)
    if table.ndim != 2:
        raise ShapeError(f"embedding-lookup: table must be 2-d, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(
            f"embedding-lookup: ids out of range for table {table.shape} (max id {ids.max()})"
        )
    return table[ids], None


def _embed_bwd(g, vals, out, ctx, *, ids):
    (table,) = vals
    gt = np.zeros_like(table)
    np.add.at(gt, np.asarray(ids).reshape(-1), g.reshape(-1, table.shape[1]))
    return (gt,)


primitive("embedding-lookup", 1)((_embed_fwd, _embed_bwd))


def _ln_fwd(x, gain, bias):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(
            f"layer-norm: input {x.shape} needs gain/bias of shape ({d},), "
            f"got {gain.shape} and {bias.shape}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _ln_bwd(g, vals, out, ctx):
    x, gain, bias = vals
    xhat, rstd = ctx
    gxhat = g * gain
    d = x.shape[-1]
    gx = rstd * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    red = tuple(range(x.ndim - 1))
    return gx, (g * xhat).sum(axis=red).reshape(d), g.sum(axis=red).reshape(d)


primitive("layer-norm", 3)((_ln_fwd, _ln_bwd))

_GELU_C = float(np.sqrt(2.0 / np.pi))


def _gelu_fwd(x):
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(g, vals, out, t):
    (x,) = vals
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


primitive("gelu", 1)((_gelu_fwd, _gelu_bwd))


def softmax_np(x: Tensor, axis: int = -1) -> Tensor:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax_np(x: Tensor, axis: int = -1) -> Tensor:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _softmax_fwd(x, *, axis=-1):
    return softmax_np(x, axis), None


def _softmax_bwd(g, vals, out, ctx, *, axis=-1):
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


primitive("softmax", 1)((_softmax_fwd, _softmax_bwd))


def _logsoftmax_fwd(x, *, axis=-1):
    return log_softmax_np(x, axis), None


def _logsoftmax_bwd(g, vals, out, ctx, *, axis=-1):
    return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)


primitive("log-softmax", 1)((_logsoftmax_fwd, _logsoftmax_bwd))


def _reshape_fwd(x, *, shape):
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None


def _reshape_bwd(g, vals, out, ctx, *, shape):
    return (g.reshape(vals[0].shape),)


primitive("reshape", 1)((_reshape_fwd, _reshape_bwd))


def _transpose_fwd(x, *, axes):
    if len(axes) != x.ndim:
        raise ShapeError(f"transpose: axes {axes} do not match shape {x.shape}")
    return np.transpose(x, axes), None


def _transpose_bwd(g, vals, out, ctx, *, axes):
    return (np.transpose(g, np.argsort(axes)),)


primitive("transpose", 1)((_transpose_fwd, _transpose_bwd))


def _slice_fwd(x, *, index):
    try:
        return x[index], None
    except IndexError as exc:
        raise ShapeError(f"slice: index {index} invalid for shape {x.shape}: {exc}") from None


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is Ellipsis for i in items)


def _slice_bwd(g, vals, out, ctx, *, index):
    gx = np.zeros_like(vals[0])
    if _is_basic(index):
        gx[index] = g
    else:
        np.add.at(gx, index, g)
    return (gx,)


primitive("slice", 1)((_slice_fwd, _slice_bwd))


def _concat_fwd(*xs, axis=-1):
    try:
        return np.concatenate(xs, axis=axis), None
    except ValueError:
        shapes = " and ".join(str(x.shape) for x in xs)
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None


def _concat_bwd(g, vals, out, ctx, *, axis=-1):
    cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return tuple(np.split(g, cuts, axis=axis))


primitive("concat")((_concat_fwd, _concat_bwd))


def _sum_fwd(x, *, axis=None, keepdims=False):
    return np.asarray(x.sum(axis=axis, keepdims=keepdims)), None


def _sum_bwd(g, vals, out, ctx, *, axis=None, keepdims=False):
    x = vals[0]
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, x.shape).copy(),)


primitive("sum", 1)((_sum_fwd, _sum_bwd))


def _mean_fwd(x, *, axis=None, keepdims=False):
    return np.asarray(x.mean(axis=axis, keepdims=keepdims)), None


def _mean_bwd(g, vals, out, ctx, *, axis=None, keepdims=False):
    x = vals[0]
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


primitive("mean", 1)((_mean_fwd, _mean_bwd))


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: str | None  # None for leaves
    inputs: tuple[int, ...]
    value: Tensor
    attrs: dict = field(default_factory=dict)
    ctx: Any = None
    requires_grad: bool = True


class Var:
    """Handle to a tape node; supports ``+``, ``*`` and ``@``."""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", idx: int):
        self.tape = tape
        self.id = idx

    @property
    def value(self) -> Tensor:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def _lift(self, other) -> "Var":
        return other if isinstance(other, Var) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.apply("add", self, self._lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        return self.tape.apply("multiply", self, self._lift(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return self.tape.apply("matmul", self, self._lift(other))

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.shape})"


class Tape:
    """Append-only record of primitive applications.

    Single owner; do not share across threads.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, node: Node) -> Var:
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, requires_grad: bool = True) -> Var:
        return self._push(Node(None, (), as_tensor(value), requires_grad=requires_grad))

    def const(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def apply(self, op: str, *inputs: Var, **attrs) -> Var:
        try:
            prim = PRIMITIVES[op]
        except KeyError:
            raise ValueError(f"unknown primitive {op!r}") from None
        if prim.arity is not None and len(inputs) != prim.arity:
            raise ValueError(f"{op}: expected {prim.arity} inputs, got {len(inputs)}")
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{op}: input node belongs to a different tape")
        vals = [self.nodes[v.id].value for v in inputs]
        out, ctx = prim.forward(*vals, **attrs)
        rg = any(self.nodes[v.id].requires_grad for v in inputs)
        return self._push(
            Node(op, tuple(v.id for v in inputs), as_tensor(out), attrs, ctx, rg)
        )

    def backward(self, loss: Var) -> dict[int, Tensor]:
        """Gradients of the scalar ``loss`` w.r.t. every ancestor that requires grad."""
        lval = self.nodes[loss.id].value
        if lval.size != 1:
            raise ShapeError(f"backward: loss must be a scalar, got shape {lval.shape}")
        grads: dict[int, Tensor] = {loss.id: np.ones_like(lval)}
        for idx in range(loss.id, -1, -1):
            g = grads.get(idx)
            node = self.nodes[idx]
            if g is None or node.op is None:
                continue
            if not node.requires_grad:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            prim = PRIMITIVES[node.op]
            if prim.takes_needs:
                needs = tuple(self.nodes[i].requires_grad for i in node.inputs)
                in_grads = prim.backward(g, vals, node.value, node.ctx, needs=needs, **node.attrs)
            else:
                in_grads = prim.backward(g, vals, node.value, node.ctx, **node.attrs)
            for i, gi in zip(node.inputs, in_grads):
                if gi is None or not self.nodes[i].requires_grad:
                    continue
                # never accumulate in place: gradient arrays may be shared views
                grads[i] = grads[i] + gi if i in grads else gi
        return {i: g for i, g in grads.items() if self.nodes[i].requires_grad}


# convenience wrappers ------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    return a.tape.apply("matmul", a, b)


def embedding(table: Var, ids) -> Var:
    return table.tape.apply("embedding-lookup", table, ids=np.asarray(ids))


def layer_norm(x: Var, gain: Var, bias: Var) -> Var:
    return x.tape.apply("layer-norm", x, gain, bias)


def gelu(x: Var) -> Var:
    return x.tape.apply("gelu", x)


def softmax(x: Var, axis: int = -1) -> Var:
    return x.tape.apply("softmax", x, axis=axis)


def log_softmax(x: Var, axis: int = -1) -> Var:
    return x.tape.apply("log-softmax", x, axis=axis)


def reshape(x: Var, shape) -> Var:
    return x.tape.apply("reshape", x, shape=tuple(shape))


def transpose(x: Var, axes) -> Var:
    return x.tape.apply("transpose", x, axes=tuple(axes))


def take(x: Var, index) -> Var:
    return x.tape.apply("slice", x, index=index)


def concat(xs: list[Var], axis: int = -1) -> Var:
    return xs[0].tape.apply("concat", *xs, axis=axis)


def vsum(x: Var, axis=None, keepdims: bool = False) -> Var:
    return x.tape.apply("sum", x, axis=axis, keepdims=keepdims)


def vmean(x: Var, axis=None, keepdims: bool = False) -> Var:
    return x.tape.apply("mean", x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def numeric_grad(f: Callable[[Tensor], float], x: Tensor, step: float = 1e-5) -> Tensor:
    """Central differences of scalar ``f`` at ``x``."""
    x = as_tensor(x).copy()
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f(x))
        flat[i] = orig - step
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near coordinate {i}")
        gflat[i] = (fp - fm) / (2 * step)
    return out


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(1e-12, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def finite_difference_check(
    f: Callable[[Tape, Var], Var], x: Tensor, step: float = 1e-5
) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` builds a scalar on the given tape from the leaf ``x``.  The error
    per coordinate is ``|a - n| / max(1e-12, |a| + |n|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = as_tensor(x)
    tape = Tape()
    leaf = tape.leaf(x)
    out = f(tape, leaf)
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("f is not finite at x")
    analytic = tape.backward(out).get(leaf.id, np.zeros_like(x))

    def scalar(z):
        t = Tape()
        return float(f(t, t.leaf(z)).value)

    return relative_error(analytic, numeric_grad(scalar, x, step))
