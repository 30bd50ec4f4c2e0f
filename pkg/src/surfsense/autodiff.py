"""Tape-based reverse-mode differentiation over dense numpy arrays.

Every differentiable operation appends a node to a :class:`Tape`.  Gradients
are obtained with :func:`grad`; passing ``create_graph=True`` records the
backward sweep itself on the tape, so the resulting gradients can be
differentiated again.  This is what lets a loss that consumes a spatial
gradient of the SDF (pulled points, Eikonal term) backpropagate into the
network weights.

All public operations are polymorphic: called on plain arrays they return
plain arrays and record nothing, called on a :class:`Var` they record a node.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "AutodiffError", "UnsupportedOpError", "Tape", "Var", "ParamStore",
    "grad", "grad_of_grad", "accumulate", "no_grad", "value_of",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "exp", "log",
    "sin", "cos", "sqrt", "sigmoid", "softplus", "relu", "absolute", "power",
    "sum", "mean", "broadcast_to", "sum_to", "reshape", "getitem", "concat",
    "stack", "cumsum", "where", "clip", "norm", "square", "maximum_const",
]


class AutodiffError(Exception):
    pass


class UnsupportedOpError(AutodiffError):
    """Raised when a second-order sweep reaches a first-order-only primitive."""


_state = threading.local()


def _recording() -> bool:
    return getattr(_state, "recording", True)


@contextlib.contextmanager
def no_grad():
    prev = _recording()
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


class Primitive:
    __slots__ = ("name", "forward", "vjp", "second_order")

    def __init__(self, name: str, forward: Callable, vjp: Callable, second_order: bool = True):
        self.name = name
        self.forward = forward
        self.vjp = vjp
        self.second_order = second_order

    def __repr__(self):
        return f"Primitive({self.name})"


class Var:
    """A node on a tape.  Leaves have ``prim is None``."""

    __array_ufunc__ = None  # make numpy defer to our reflected operators
    __slots__ = ("tape", "index", "prim", "inputs", "attrs", "value")

    def __init__(self, tape, index, prim, inputs, attrs, value):
        self.tape = tape
        self.index = index
        self.prim = prim
        self.inputs = inputs
        self.attrs = attrs
        self.value = value

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    @property
    def dtype(self):
        return self.value.dtype

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        op = self.prim.name if self.prim else "leaf"
        return f"Var(#{self.index} {op} shape={self.shape})"

    def __add__(self, o): return add(self, o)
    def __radd__(self, o): return add(o, self)
    def __sub__(self, o): return sub(self, o)
    def __rsub__(self, o): return sub(o, self)
    def __mul__(self, o): return mul(self, o)
    def __rmul__(self, o): return mul(o, self)
    def __truediv__(self, o): return div(self, o)
    def __rtruediv__(self, o): return div(o, self)
    def __neg__(self): return neg(self)
    def __pow__(self, p): return power(self, p)
    def __matmul__(self, o): return matmul(self, o)
    def __rmatmul__(self, o): return matmul(o, self)
    def __getitem__(self, idx): return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Tape:
    """Append-only record of operations; node order is a topological order."""

    def __init__(self):
        self.nodes: list[Var] = []

    def __len__(self):
        return len(self.nodes)

    def var(self, value, dtype=None) -> Var:
        value = np.asarray(value, dtype=dtype)
        if dtype is None and not np.issubdtype(value.dtype, np.floating):
            value = value.astype(np.float64)
        node = Var(self, len(self.nodes), None, (), None, value)
        self.nodes.append(node)
        return node

    def _record(self, prim, inputs, attrs, value) -> Var:
        node = Var(self, len(self.nodes), prim, tuple(inputs), attrs, value)
        self.nodes.append(node)
        return node

    def replay(self) -> bool:
        """Recompute every node from its parents; True when bit-identical."""
        for node in self.nodes:
            if node.prim is None:
                continue
            vals = [value_of(x) for x in node.inputs]
            again = node.prim.forward(*vals, **node.attrs)
            if again.shape != node.value.shape or again.tobytes() != node.value.tobytes():
                return False
        return True


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _apply(prim: Primitive, *args, **attrs):
    tape = None
    vals = []
    for a in args:
        if isinstance(a, Var):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise AutodiffError(f"{prim.name}: operands live on different tapes")
            vals.append(a.value)
        else:
            vals.append(a)
    out = prim.forward(*vals, **attrs)
    if tape is None or not _recording():
        return out
    return tape._record(prim, args, attrs, out)


def _shape(x):
    return np.shape(value_of(x))


# ----------------------------------------------------------------------------
# reductions over broadcast dimensions


def _sum_to_value(x, shape):
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    return x.sum(axis=axes, keepdims=True).reshape(shape)


def _unbroadcast(g, shape):
    if _shape(g) == tuple(shape):
        return g
    return sum_to(g, shape)


# ----------------------------------------------------------------------------
# primitive table; vjp(g, out, inputs, needs, **attrs) -> list of grads


def _vjp_add(g, out, inp, needs):
    a, b = inp
    return [_unbroadcast(g, _shape(a)) if needs[0] else None,
            _unbroadcast(g, _shape(b)) if needs[1] else None]


def _vjp_sub(g, out, inp, needs):
    a, b = inp
    return [_unbroadcast(g, _shape(a)) if needs[0] else None,
            _unbroadcast(neg(g), _shape(b)) if needs[1] else None]


def _vjp_mul(g, out, inp, needs):
    a, b = inp
    return [_unbroadcast(mul(g, b), _shape(a)) if needs[0] else None,
            _unbroadcast(mul(g, a), _shape(b)) if needs[1] else None]


def _vjp_div(g, out, inp, needs):
    a, b = inp
    ga = gb = None
    if needs[0]:
        ga = _unbroadcast(div(g, b), _shape(a))
    if needs[1]:
        gb = _unbroadcast(neg(div(mul(g, out), b)), _shape(b))
    return [ga, gb]


def _vjp_matmul(g, out, inp, needs):
    a, b = inp
    return [matmul(g, transpose(b)) if needs[0] else None,
            matmul(transpose(a), g) if needs[1] else None]


def _vjp_sum(g, out, inp, needs, axis=None, keepdims=False):
    (x,) = inp
    shape = _shape(x)
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        kshape = list(shape)
        for ax in axes:
            kshape[ax % len(shape)] = 1
        g = reshape(g, tuple(kshape))
    return [broadcast_to(g, shape)]


def _fwd_scatter(g, idx=None, shape=None):
    z = np.zeros(shape, dtype=g.dtype)
    if _basic_index(idx):
        z[idx] = g
    else:
        np.add.at(z, idx, g)
    return z


def _basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis
               for i in items)


def _fwd_concat(*xs, axis=0):
    return np.concatenate(xs, axis=axis)


def _vjp_concat(g, out, inp, needs, axis=0):
    res = []
    start = 0
    nd = len(_shape(out))
    for x, nx in zip(inp, needs):
        n = _shape(x)[axis]
        if nx:
            sl = [slice(None)] * nd
            sl[axis] = slice(start, start + n)
            res.append(getitem(g, tuple(sl)))
        else:
            res.append(None)
        start += n
    return res


def _rcumsum(x, axis):
    return np.flip(np.cumsum(np.flip(x, axis), axis=axis), axis)


def _fwd_where(a, b, cond=None):
    return np.where(cond, a, b)


def _vjp_where(g, out, inp, needs, cond=None):
    a, b = inp
    zero = np.zeros((), dtype=value_of(g).dtype)
    return [_unbroadcast(where(cond, g, zero), _shape(a)) if needs[0] else None,
            _unbroadcast(where(cond, zero, g), _shape(b)) if needs[1] else None]


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def _fwd_softplus(x, beta=1.0):
    y = np.asarray(x) * beta
    return (np.log1p(np.exp(-np.abs(y))) + np.maximum(y, 0)) / beta


_P = {}


def _prim(name, forward, vjp, second_order=True):
    p = Primitive(name, forward, vjp, second_order)
    _P[name] = p
    return p


_ADD = _prim("add", np.add, _vjp_add)
_SUB = _prim("sub", np.subtract, _vjp_sub)
_MUL = _prim("mul", np.multiply, _vjp_mul)
_DIV = _prim("div", np.divide, _vjp_div)
_NEG = _prim("neg", np.negative, lambda g, o, i, n: [neg(g)])
_MATMUL = _prim("matmul", np.matmul, _vjp_matmul)
_TRANSPOSE = _prim("transpose", np.transpose, lambda g, o, i, n: [transpose(g)])
_EXP = _prim("exp", np.exp, lambda g, o, i, n: [mul(g, o)])
_LOG = _prim("log", np.log, lambda g, o, i, n: [div(g, i[0])])
_SIN = _prim("sin", np.sin, lambda g, o, i, n: [mul(g, cos(i[0]))])
_COS = _prim("cos", np.cos, lambda g, o, i, n: [neg(mul(g, sin(i[0])))])
_SQRT = _prim("sqrt", np.sqrt, lambda g, o, i, n: [div(mul(g, 0.5), o)])
_SIGMOID = _prim("sigmoid", _sigmoid,
                 lambda g, o, i, n: [mul(g, mul(o, sub(1.0, o)))])
_SOFTPLUS = _prim("softplus", _fwd_softplus,
                  lambda g, o, i, n, beta=1.0: [mul(g, sigmoid(mul(i[0], beta)))])
# relu has no usable second derivative; second-order sweeps through it raise
_RELU = _prim("relu", lambda x: np.maximum(x, 0),
              lambda g, o, i, n: [mul(g, (value_of(i[0]) > 0).astype(value_of(g).dtype))],
              second_order=False)
_ABS = _prim("abs", np.abs,
             lambda g, o, i, n: [mul(g, np.sign(value_of(i[0])))])
_POWER = _prim("power", lambda x, p=1.0: np.power(x, p),
               lambda g, o, i, n, p=1.0: [mul(g, mul(p, power(i[0], p - 1.0)))])
_SUM = _prim("sum", lambda x, axis=None, keepdims=False: np.sum(x, axis=axis, keepdims=keepdims),
             _vjp_sum)
_BROADCAST = _prim("broadcast_to", lambda x, shape=None: np.broadcast_to(x, shape),
                   lambda g, o, i, n, shape=None: [sum_to(g, _shape(i[0]))])
_SUM_TO = _prim("sum_to", lambda x, shape=None: _sum_to_value(x, shape),
                lambda g, o, i, n, shape=None: [broadcast_to(g, _shape(i[0]))])
_RESHAPE = _prim("reshape", lambda x, shape=None: np.reshape(x, shape),
                 lambda g, o, i, n, shape=None: [reshape(g, _shape(i[0]))])
_GETITEM = _prim("getitem", lambda x, idx=None: x[idx],
                 lambda g, o, i, n, idx=None: [scatter(g, idx, _shape(i[0]))])
_SCATTER = _prim("scatter", _fwd_scatter,
                 lambda g, o, i, n, idx=None, shape=None: [getitem(g, idx)])
_CONCAT = _prim("concat", _fwd_concat, _vjp_concat)
_CUMSUM = _prim("cumsum", lambda x, axis=-1: np.cumsum(x, axis=axis),
                lambda g, o, i, n, axis=-1: [rcumsum(g, axis)])
_RCUMSUM = _prim("rcumsum", lambda x, axis=-1: _rcumsum(x, axis),
                 lambda g, o, i, n, axis=-1: [cumsum(g, axis)])
_WHERE = _prim("where", _fwd_where, _vjp_where)


# ----------------------------------------------------------------------------
# public operations


def add(a, b): return _apply(_ADD, a, b)
def sub(a, b): return _apply(_SUB, a, b)
def mul(a, b): return _apply(_MUL, a, b)
def div(a, b): return _apply(_DIV, a, b)
def neg(a): return _apply(_NEG, a)
def matmul(a, b): return _apply(_MATMUL, a, b)
def transpose(a): return _apply(_TRANSPOSE, a)
def exp(a): return _apply(_EXP, a)
def log(a): return _apply(_LOG, a)
def sin(a): return _apply(_SIN, a)
def cos(a): return _apply(_COS, a)
def sqrt(a): return _apply(_SQRT, a)
def sigmoid(a): return _apply(_SIGMOID, a)
def relu(a): return _apply(_RELU, a)
def absolute(a): return _apply(_ABS, a)
def square(a): return mul(a, a)


def softplus(a, beta=1.0):
    return _apply(_SOFTPLUS, a, beta=beta)


def power(a, p):
    return _apply(_POWER, a, p=float(p))


def sum(a, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    return _apply(_SUM, a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    shape = _shape(a)
    if axis is None:
        count = int(np.prod(shape))
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        count = int(np.prod([shape[ax] for ax in axes]))
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def broadcast_to(a, shape):
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return _apply(_BROADCAST, a, shape=shape)


def sum_to(a, shape):
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return _apply(_SUM_TO, a, shape=shape)


def reshape(a, shape):
    shape = tuple(shape)
    if _shape(a) == shape:
        return a
    return _apply(_RESHAPE, a, shape=shape)


def getitem(a, idx):
    return _apply(_GETITEM, a, idx=idx)


def scatter(g, idx, shape):
    return _apply(_SCATTER, g, idx=idx, shape=tuple(shape))


def concat(xs: Sequence, axis=0):
    return _apply(_CONCAT, *xs, axis=axis)


def stack(xs: Sequence, axis=-1):
    expanded = []
    for x in xs:
        shape = list(_shape(x))
        ax = axis if axis >= 0 else len(shape) + 1 + axis
        shape.insert(ax, 1)
        expanded.append(reshape(x, tuple(shape)))
    return concat(expanded, axis=axis)


def cumsum(a, axis=-1):
    return _apply(_CUMSUM, a, axis=axis)


def rcumsum(a, axis=-1):
    return _apply(_RCUMSUM, a, axis=axis)


def where(cond, a, b):
    """Select with a constant (non-differentiable) boolean mask."""
    return _apply(_WHERE, a, b, cond=np.asarray(cond, dtype=bool))


def clip(a, lo, hi):
    v = value_of(a)
    mask = (v >= lo) & (v <= hi)
    bound = np.clip(v, lo, hi).astype(v.dtype)
    return where(mask, a, bound)


def maximum_const(a, c):
    v = value_of(a)
    return where(v >= c, a, np.asarray(c, dtype=v.dtype))


def norm(a, axis=-1, keepdims=False, eps=0.0):
    sq = sum(mul(a, a), axis=axis, keepdims=keepdims)
    if eps:
        sq = add(sq, eps)
    return sqrt(sq)


# ----------------------------------------------------------------------------
# differentiation


def _check_member(tape: Tape, x, what: str):
    if not isinstance(x, Var):
        raise AutodiffError(f"{what} is not a tape variable")
    if x.tape is not tape or x.index >= len(tape.nodes) or tape.nodes[x.index] is not x:
        raise AutodiffError(f"{what} is dangling: node not on this tape")


def grad(tape: Tape, output: Var, wrt: Iterable[Var], create_graph: bool = False,
         cotangent=None) -> dict:
    """Reverse sweep from ``output``; returns ``{var: d output / d var}``.

    ``output`` must be scalar unless an explicit ``cotangent`` is supplied.
    Variables that ``output`` does not depend on map to zeros.  With
    ``create_graph`` the returned gradients are tape variables themselves.
    """
    _check_member(tape, output, "output")
    wrt = list(wrt)
    for i, w in enumerate(wrt):
        _check_member(tape, w, f"wrt[{i}]")
    if cotangent is None:
        if output.value.size != 1:
            raise AutodiffError(f"output must be scalar, got shape {output.shape}")
        cotangent = np.ones_like(output.value)
    else:
        cotangent = value_of(cotangent) if not create_graph else cotangent
        if _shape(cotangent) != output.shape:
            raise AutodiffError("cotangent shape does not match output")

    nodes = tape.nodes
    top = output.index
    wrt_idx = {w.index for w in wrt}
    lo = min(wrt_idx) if wrt_idx else top + 1
    dep = bytearray(top + 1)
    for i in wrt_idx:
        if i <= top:
            dep[i] = 1
    for i in range(lo, top + 1):
        if dep[i]:
            continue
        for x in nodes[i].inputs:
            if isinstance(x, Var) and dep[x.index]:
                dep[i] = 1
                break

    found = {}
    grads = {top: cotangent} if dep[top] else {}
    for i in range(top, lo - 1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        if i in wrt_idx:
            found[i] = g
        node = nodes[i]
        if node.prim is None:
            continue
        needs = tuple(isinstance(x, Var) and bool(dep[x.index]) for x in node.inputs)
        if not any(needs):
            continue
        if create_graph:
            if not node.prim.second_order:
                raise UnsupportedOpError(
                    f"primitive '{node.prim.name}' has no second-order rule")
            gs = node.prim.vjp(g, node, node.inputs, needs, **node.attrs)
        else:
            with no_grad():
                gs = node.prim.vjp(value_of(g), node.value,
                                   [value_of(x) for x in node.inputs], needs, **node.attrs)
        for x, gx, nd in zip(node.inputs, gs, needs):
            if not nd or gx is None:
                continue
            j = x.index
            if j in grads:
                if create_graph:
                    grads[j] = add(grads[j], gx)
                else:
                    grads[j] = grads[j] + gx
            else:
                grads[j] = gx

    out = {}
    for w in wrt:
        g = found.get(w.index)
        if g is None:
            g = np.zeros_like(w.value)
        elif not create_graph:
            g = np.asarray(value_of(g))
        out[w] = g
    return out


def grad_of_grad(tape: Tape, output: Var, point: Var, wrt: Iterable[Var]) -> dict:
    """Jacobian of ``d output / d point`` with respect to each variable in ``wrt``.

    Returns ``{var: J}`` with ``J.shape == point.shape + var.shape``.
    """
    wrt = list(wrt)
    g = grad(tape, output, [point], create_graph=True)[point]
    shape = point.shape
    jac = {w: np.zeros(shape + w.shape, dtype=w.dtype) for w in wrt}
    if not isinstance(g, Var):
        return jac
    for k in np.ndindex(*shape):
        comp = g[k] if shape else g
        res = grad(tape, sum(comp), wrt)
        for w in wrt:
            jac[w][k] = res[w]
    return jac


# ----------------------------------------------------------------------------
# parameters


class ParamStore:
    """Flat parameter vector with named segments and an ordered gradient accumulator.

    Contributions passed to :meth:`accumulate` are buffered with a sort key
    and summed in key order by :meth:`reduce`, so the result does not depend
    on the order in which workers deliver them.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.data = np.zeros(0, dtype=self.dtype)
        self.grad = np.zeros(0, dtype=self.dtype)
        self.segments: dict[str, tuple[int, tuple]] = {}
        self._pending: list = []
        self._counter = 0

    def add(self, name: str, value) -> None:
        if name in self.segments:
            raise KeyError(f"duplicate parameter segment {name!r}")
        value = np.asarray(value, dtype=self.dtype)
        self.segments[name] = (self.data.size, value.shape)
        self.data = np.concatenate([self.data, value.ravel()])
        self.grad = np.zeros_like(self.data)

    def names(self):
        return list(self.segments)

    def slice_of(self, name):
        off, shape = self.segments[name]
        return slice(off, off + int(np.prod(shape, dtype=np.int64)))

    def __getitem__(self, name):
        off, shape = self.segments[name]
        return self.data[self.slice_of(name)].reshape(shape)

    def __setitem__(self, name, value):
        self.data[self.slice_of(name)] = np.asarray(value, dtype=self.dtype).ravel()

    def bind(self, tape: Tape) -> dict:
        """Leaf variables viewing the current parameter values."""
        return {name: tape.var(self[name]) for name in self.segments}

    def astype(self, dtype) -> "ParamStore":
        other = ParamStore(dtype)
        for name in self.segments:
            other.add(name, self[name])
        return other

    def accumulate(self, gradmap: dict, key=None) -> None:
        for name, g in gradmap.items():
            if name not in self.segments:
                raise KeyError(f"unknown parameter segment {name!r}")
            shape = self.segments[name][1]
            if np.shape(g) != tuple(shape):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape {shape} for {name!r}")
        if key is None:
            key = self._counter
        self._counter += 1
        self._pending.append((key, gradmap))

    def reduce(self) -> np.ndarray:
        """Fold pending contributions into the accumulator in key order."""
        pending = sorted(self._pending, key=lambda kv: kv[0])
        self._pending = []
        for _, gradmap in pending:
            for name in self.segments:
                if name in gradmap:
                    sl = self.slice_of(name)
                    self.grad[sl] += np.asarray(gradmap[name], dtype=self.dtype).ravel()
        return self.grad

    def zero_grad(self) -> None:
        self._pending = []
        self._counter = 0
        self.grad[:] = 0


def accumulate(store: ParamStore, gradmap: dict, key=None) -> None:
    store.accumulate(gradmap, key=key)
