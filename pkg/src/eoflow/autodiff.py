"""Dense float64 tensors with reverse-mode gradients and forward-mode jvps.

Reverse mode records a graph of primitive applications while a program runs;
``backward`` walks it once in reverse topological order.  Forward mode uses
:class:`Dual` tensors whose tangents are ordinary recorded tensors, so a
jacobian-vector product computed inside a loss is itself differentiable with
respect to parameters and inputs (one reverse pass over one forward pass).

Broadcasting is limited to 0-d scalars combined with arbitrary tensors; every
other shape change must be spelled out with :func:`expand` or :func:`reshape`.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateGeometryError, NumericalError, ShapeError

__all__ = [
    "Tensor", "Dual", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "tanh",
    "softplus", "sigmoid", "sqrt", "sum", "mean", "reshape", "transpose",
    "expand", "index", "concat", "sqnorm", "inv", "logabsdet", "logdet_spd",
    "evaluate", "gradient", "jvp", "backward", "value_of",
]

LOG_2PI = float(np.log(2.0 * np.pi))


class Tensor:
    """Immutable float64 array, optionally a node of a recorded graph."""

    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, _op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if _op == "leaf" and arr is data and arr.flags.writeable:
            arr = arr.copy()  # never freeze a caller-owned buffer
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.parents = _parents
        self.backward_fn = _backward
        self.op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return np.array(self.data)

    def item(self):
        return float(self.data)

    def sum(self, axis=None):
        return sum(self, axis)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, key): return index(self, key)


class Dual:
    """Primal/tangent pair; a ``None`` tangent stands for an exact zero."""

    __slots__ = ("primal", "tangent")
    __array_priority__ = 101.0

    def __init__(self, primal, tangent=None):
        primal = _lift(primal)
        if tangent is not None:
            tangent = _lift(tangent)
            if tangent.shape != primal.shape:
                raise ShapeError("dual", primal.shape, tangent.shape,
                                 detail="tangent must match primal")
        self.primal = primal
        self.tangent = tangent

    @property
    def shape(self):
        return self.primal.shape

    @property
    def ndim(self):
        return self.primal.ndim

    @property
    def data(self):
        return self.primal.data

    @property
    def T(self):
        return transpose(self)

    def tangent_or_zeros(self) -> Tensor:
        if self.tangent is None:
            return Tensor(np.zeros(self.shape))
        return self.tangent

    def sum(self, axis=None):
        return sum(self, axis)

    def __repr__(self):
        return f"Dual(shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, key): return index(self, key)


def tensor(values, requires_grad=False) -> Tensor:
    """Build an input tensor, rejecting NaN and infinity."""
    arr = np.array(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise NumericalError("input tensor contains non-finite values")
    return Tensor(arr, requires_grad)


def constant(values) -> Tensor:
    return Tensor(np.array(values, dtype=np.float64))


def value_of(x) -> np.ndarray:
    """Plain array behind a Tensor, Dual or array-like."""
    if isinstance(x, Dual):
        return x.primal.data
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# graph plumbing

def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Dual):
        raise TypeError("cannot lift a Dual to a Tensor")
    return Tensor(np.asarray(x, dtype=np.float64))


def _as_dual(x) -> Dual:
    return x if isinstance(x, Dual) else Dual(_lift(x))


def _is_dual(*xs) -> bool:
    return any(isinstance(x, Dual) for x in xs)


def _node(data, parents, backward, op) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, False, _op=op)


def _check_same(op, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(op, a.shape, b.shape, detail="no implicit broadcasting; use expand()")


def _reduce_to(g, shape):
    if shape == () and g.shape != ():
        return np.asarray(g.sum())
    return g


def _unbroadcast(g, shape):
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _swap(a):
    return np.swapaxes(a, -1, -2)


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return add(a, b)


# ---------------------------------------------------------------------------
# recorded primitives on Tensors

def _t_add(a, b):
    _check_same("add", a, b)
    return _node(a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def _t_sub(a, b):
    _check_same("sub", a, b)
    return _node(a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)), "sub")


def _t_mul(a, b):
    _check_same("mul", a, b)
    return _node(a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
                 "mul")


def _t_div(a, b):
    _check_same("div", a, b)
    out = a.data / b.data
    return _node(out, (a, b),
                 lambda g: (_reduce_to(g / b.data, a.shape),
                            _reduce_to(-g * out / b.data, b.shape)),
                 "div")


def _t_neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def _t_matmul(a, b):
    if a.ndim == 0 or b.ndim == 0:
        raise ShapeError("matmul", a.shape, b.shape, detail="scalars not allowed")
    k_a = a.shape[-1]
    k_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if k_a != k_b:
        raise ShapeError("matmul", a.shape, b.shape, detail="inner dimensions differ")
    if a.ndim == 1 and b.ndim > 2:
        raise ShapeError("matmul", a.shape, b.shape)
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dimensions differ")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError("matmul", a.shape, b.shape, detail="expand the left operand")
    out = a.data @ b.data

    def bwd(g):
        A, B = a.data, b.data
        if b.ndim == 1:
            if a.ndim == 1:
                return g * B, g * A
            return g[..., None] * B, np.einsum("...mk,...m->k", A, g)
        if a.ndim == 1:
            return B @ g, np.outer(A, g)
        if b.ndim == 2:
            ga = g @ B.T
            gb = A.reshape(-1, A.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb
        return g @ _swap(B), _swap(A) @ g

    return _node(out, (a, b), bwd, "matmul")


def _t_exp(a):
    e = np.exp(a.data)
    return _node(e, (a,), lambda g: (g * e,), "exp")


def _t_log(a):
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def _t_tanh(a):
    th = np.tanh(a.data)
    return _node(th, (a,), lambda g: (g * (1.0 - th * th),), "tanh")


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _t_softplus(a):
    return _node(np.logaddexp(0.0, a.data), (a,),
                 lambda g: (g * _sigmoid_np(a.data),), "softplus")


def _t_sigmoid(a):
    s = _sigmoid_np(a.data)
    return _node(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def _t_sqrt(a):
    r = np.sqrt(a.data)
    return _node(r, (a,), lambda g: (0.5 * g / r,), "sqrt")


def _t_sum(a, axis):
    out = np.sum(a.data, axis=axis)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), bwd, "sum")


def _t_reshape(a, shape):
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError("reshape", a.shape, tuple(np.atleast_1d(shape))) from exc
    return _node(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def _t_transpose(a):
    if a.ndim < 2:
        raise ShapeError("transpose", a.shape, detail="needs at least 2 dimensions")
    return _node(_swap(a.data), (a,), lambda g: (_swap(g),), "transpose")


def _t_expand(a, shape):
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise ShapeError("expand", a.shape, shape) from exc
    return _node(out, (a,), lambda g: (_unbroadcast(g, a.shape),), "expand")


def _is_basic_key(key):
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (slice, int, np.integer)) or k is Ellipsis or k is None for k in items)


def _t_index(a, key):
    try:
        out = np.array(a.data[key])
    except IndexError as exc:
        raise ShapeError("index", a.shape, detail=str(exc)) from exc
    basic = _is_basic_key(key)

    def bwd(g):
        z = np.zeros(a.shape)
        if basic:
            z[key] = g
        else:
            np.add.at(z, key, g)
        return (z,)

    return _node(out, (a,), bwd, "index")


def _t_concat(xs, axis):
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError("concat", *[x.shape for x in xs]) from exc
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _node(out, tuple(xs), lambda g: tuple(np.split(g, sizes, axis=axis)), "concat")


def _t_sqnorm(a, axis):
    out = np.sum(a.data * a.data, axis=axis)
    return _node(out, (a,), lambda g: (2.0 * a.data * np.expand_dims(g, axis),), "sqnorm")


def _square_check(op, a):
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(op, a.shape, detail="expects square matrices")


def _t_inv(a):
    _square_check("inv", a)
    try:
        ai = np.linalg.inv(a.data)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError("inv: singular matrix") from exc
    ait = _swap(ai)
    return _node(ai, (a,), lambda g: (-(ait @ g @ ait),), "inv")


def _t_logabsdet(a):
    _square_check("logabsdet", a)
    sign, ld = np.linalg.slogdet(a.data)
    if np.any(sign == 0) or not np.all(np.isfinite(ld)):
        raise DegenerateGeometryError("logabsdet: singular matrix")
    return _node(ld, (a,),
                 lambda g: (np.asarray(g)[..., None, None] * _swap(np.linalg.inv(a.data)),),
                 "logabsdet")


def _t_logdet_spd(a):
    _square_check("logdet_spd", a)
    try:
        chol = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError(
            "logdet_spd: Gram matrix is not positive definite (degenerate Jacobian block)") from exc
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    if np.any(diag <= 0):
        raise DegenerateGeometryError("logdet_spd: zero pivot in Cholesky factor")
    ld = 2.0 * np.sum(np.log(diag), axis=-1)
    return _node(ld, (a,),
                 lambda g: (np.asarray(g)[..., None, None] * np.linalg.inv(a.data),),
                 "logdet_spd")


# ---------------------------------------------------------------------------
# public primitives: dispatch on Dual, otherwise record on Tensors

def add(a, b):
    if _is_dual(a, b):
        a, b = _as_dual(a), _as_dual(b)
        return Dual(add(a.primal, b.primal), _tadd(a.tangent, b.tangent))
    return _t_add(_lift(a), _lift(b))


def sub(a, b):
    if _is_dual(a, b):
        a, b = _as_dual(a), _as_dual(b)
        tb = None if b.tangent is None else neg(b.tangent)
        return Dual(sub(a.primal, b.primal), _tadd(a.tangent, tb))
    return _t_sub(_lift(a), _lift(b))


def mul(a, b):
    if _is_dual(a, b):
        a, b = _as_dual(a), _as_dual(b)
        ta = None if a.tangent is None else mul(a.tangent, b.primal)
        tb = None if b.tangent is None else mul(a.primal, b.tangent)
        return Dual(mul(a.primal, b.primal), _tadd(ta, tb))
    return _t_mul(_lift(a), _lift(b))


def div(a, b):
    if _is_dual(a, b):
        a, b = _as_dual(a), _as_dual(b)
        out = div(a.primal, b.primal)
        ta = None if a.tangent is None else div(a.tangent, b.primal)
        tb = None if b.tangent is None else neg(div(mul(out, b.tangent), b.primal))
        return Dual(out, _tadd(ta, tb))
    return _t_div(_lift(a), _lift(b))


def neg(a):
    if isinstance(a, Dual):
        return Dual(neg(a.primal), None if a.tangent is None else neg(a.tangent))
    return _t_neg(_lift(a))


def matmul(a, b):
    if _is_dual(a, b):
        a, b = _as_dual(a), _as_dual(b)
        ta = None if a.tangent is None else matmul(a.tangent, b.primal)
        tb = None if b.tangent is None else matmul(a.primal, b.tangent)
        return Dual(matmul(a.primal, b.primal), _tadd(ta, tb))
    return _t_matmul(_lift(a), _lift(b))


def exp(a):
    if isinstance(a, Dual):
        e = exp(a.primal)
        return Dual(e, None if a.tangent is None else mul(a.tangent, e))
    return _t_exp(_lift(a))


def log(a):
    if isinstance(a, Dual):
        return Dual(log(a.primal), None if a.tangent is None else div(a.tangent, a.primal))
    return _t_log(_lift(a))


def tanh(a):
    if isinstance(a, Dual):
        th = tanh(a.primal)
        t = None if a.tangent is None else mul(a.tangent, sub(1.0, mul(th, th)))
        return Dual(th, t)
    return _t_tanh(_lift(a))


def softplus(a):
    if isinstance(a, Dual):
        t = None if a.tangent is None else mul(a.tangent, sigmoid(a.primal))
        return Dual(softplus(a.primal), t)
    return _t_softplus(_lift(a))


def sigmoid(a):
    if isinstance(a, Dual):
        s = sigmoid(a.primal)
        t = None if a.tangent is None else mul(a.tangent, mul(s, sub(1.0, s)))
        return Dual(s, t)
    return _t_sigmoid(_lift(a))


def sqrt(a):
    if isinstance(a, Dual):
        r = sqrt(a.primal)
        return Dual(r, None if a.tangent is None else div(a.tangent, mul(2.0, r)))
    return _t_sqrt(_lift(a))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    if isinstance(a, Dual):
        return Dual(sum(a.primal, axis), None if a.tangent is None else sum(a.tangent, axis))
    return _t_sum(_lift(a), axis)


def mean(a, axis=None):
    n = value_of(a).size if axis is None else value_of(a).shape[axis]
    return mul(sum(a, axis), 1.0 / n)


def reshape(a, shape):
    if isinstance(a, Dual):
        return Dual(reshape(a.primal, shape),
                    None if a.tangent is None else reshape(a.tangent, shape))
    return _t_reshape(_lift(a), shape)


def transpose(a):
    """Swap the last two axes."""
    if isinstance(a, Dual):
        return Dual(transpose(a.primal), None if a.tangent is None else transpose(a.tangent))
    return _t_transpose(_lift(a))


def expand(a, shape):
    """Explicit numpy-style broadcast of ``a`` to ``shape``."""
    if isinstance(a, Dual):
        return Dual(expand(a.primal, shape),
                    None if a.tangent is None else expand(a.tangent, shape))
    return _t_expand(_lift(a), shape)


def index(a, key):
    if isinstance(a, Dual):
        return Dual(index(a.primal, key), None if a.tangent is None else index(a.tangent, key))
    return _t_index(_lift(a), key)


def concat(xs: Sequence, axis=-1):
    if _is_dual(*xs):
        ds = [_as_dual(x) for x in xs]
        p = concat([d.primal for d in ds], axis)
        if all(d.tangent is None for d in ds):
            return Dual(p)
        ts = [d.tangent_or_zeros() for d in ds]
        return Dual(p, concat(ts, axis))
    return _t_concat([_lift(x) for x in xs], axis)


def sqnorm(a, axis=-1):
    """Sum of squares along ``axis``."""
    if isinstance(a, Dual):
        t = None if a.tangent is None else mul(2.0, sum(mul(a.primal, a.tangent), axis))
        return Dual(sqnorm(a.primal, axis), t)
    return _t_sqnorm(_lift(a), axis)


def inv(a):
    if isinstance(a, Dual):
        ai = inv(a.primal)
        t = None if a.tangent is None else neg(matmul(matmul(ai, a.tangent), ai))
        return Dual(ai, t)
    return _t_inv(_lift(a))


def logabsdet(a):
    """log|det a| over the last two axes."""
    if isinstance(a, Dual):
        ld = logabsdet(a.primal)
        if a.tangent is None:
            return Dual(ld)
        t = sum(sum(mul(transpose(inv(a.primal)), a.tangent), -1), -1)
        return Dual(ld, t)
    return _t_logabsdet(_lift(a))


def logdet_spd(a):
    """log det of symmetric positive definite matrices via Cholesky."""
    if isinstance(a, Dual):
        ld = logdet_spd(a.primal)
        if a.tangent is None:
            return Dual(ld)
        t = sum(sum(mul(inv(a.primal), a.tangent), -1), -1)
        return Dual(ld, t)
    return _t_logdet_spd(_lift(a))


# ---------------------------------------------------------------------------
# drivers

def _toposort(root: Tensor):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` with respect to ``leaves``."""
    if output.size != 1:
        raise ShapeError("backward", output.shape, detail="output must be scalar")
    if not output.requires_grad:
        return [np.zeros(leaf.shape) for leaf in leaves]
    wanted = {id(leaf) for leaf in leaves}
    grads = {id(output): np.ones(output.shape)}
    for node in reversed(_toposort(output)):
        key = id(node)
        g = grads.get(key) if key in wanted else grads.pop(key, None)
        if g is None or node.backward_fn is None:
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            pk = id(p)
            grads[pk] = grads[pk] + pg if pk in grads else pg
    return [np.array(grads.get(id(leaf), np.zeros(leaf.shape)), dtype=np.float64)
            .reshape(leaf.shape) for leaf in leaves]


def evaluate(program: Callable, inputs: Sequence) -> list[np.ndarray]:
    """Run ``program`` on fresh input tensors and return plain arrays."""
    args = [tensor(x) for x in inputs]
    out = program(*args)
    outs = out if isinstance(out, (list, tuple)) else [out]
    return [np.array(value_of(o)) for o in outs]


def gradient(program: Callable, at: Sequence, wrt: Sequence[int] | None = None) -> list[np.ndarray]:
    """Reverse-mode gradient of a scalar-valued ``program`` at ``at``."""
    wrt = list(range(len(at))) if wrt is None else list(wrt)
    leaves = [tensor(x, requires_grad=i in wrt) for i, x in enumerate(at)]
    out = program(*leaves)
    if isinstance(out, Dual):
        out = out.primal
    out = _lift(out)
    if out.size != 1:
        raise ShapeError("gradient", out.shape, detail="program output must be scalar")
    return backward(out, [leaves[i] for i in wrt])


def jvp(program: Callable, at, tangent) -> tuple[np.ndarray, np.ndarray]:
    """Value and directional derivative ``J(at) @ tangent`` of ``program``."""
    x = tensor(at)
    t = tensor(tangent)
    if t.shape != x.shape:
        raise ShapeError("jvp", x.shape, t.shape, detail="tangent must match input")
    out = _as_dual(program(Dual(x, t)))
    return np.array(out.primal.data), np.array(out.tangent_or_zeros().data)
