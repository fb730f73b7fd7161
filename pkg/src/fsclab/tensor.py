"""Dense tensors with a reverse-mode tape.

Every differentiable operation appends a node to the active :class:`Tape`;
:func:`backward` walks that tape in strict reverse append order and
accumulates vector-Jacobian products into leaf tensors.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "DomainError",
    "NotScalar",
    "DetachedTensor",
    "TiedExtremum",
    "GradCheckResult",
    "tensor",
    "apply",
    "backward",
    "no_grad",
    "grad_check",
    "concat",
    "where",
    "logsumexp",
]

NORM_GUARD = 1e-8


class ShapeMismatch(ValueError):
    pass


class DomainError(ArithmeticError):
    pass


class NotScalar(ValueError):
    pass


class DetachedTensor(RuntimeError):
    pass


class TiedExtremum(ArithmeticError):
    pass


# --------------------------------------------------------------------------
# tape


class _State(threading.local):
    def __init__(self):
        self.tapes: list[Tape] = []
        self.default = Tape()
        self.grad_enabled = True
        self.extrema: list | None = None


@dataclass
class Node:
    kind: str
    inputs: tuple
    out: "Tensor"
    vjp: Callable


@dataclass
class Tape:
    """Append-only list of recorded operations.

    Use as a context manager to scope one training step; outside any
    ``with Tape()`` block ops record onto a per-thread default tape.
    """

    nodes: list = field(default_factory=list)

    def record(self, kind, inputs, out, vjp):
        out._tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append(Node(kind, inputs, out, vjp))

    def clear(self):
        for node in self.nodes:
            node.out._tape = None
            node.out.tape_id = None
        self.nodes.clear()

    def __enter__(self):
        _state.tapes.append(self)
        return self

    def __exit__(self, *exc):
        _state.tapes.pop()
        return False

    @staticmethod
    def current() -> "Tape":
        return _state.tapes[-1] if _state.tapes else _state.default


_state = _State()


@contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextmanager
def _record_extrema():
    prev = _state.extrema
    _state.extrema = []
    try:
        yield _state.extrema
    finally:
        _state.extrema = prev


# --------------------------------------------------------------------------
# tensor


def _as_array(x, like=None):
    if isinstance(x, Tensor):
        return x.data
    arr = np.asarray(x)
    # constants follow the tensor's precision
    if like is not None and like.dtype.kind == "f" and arr.dtype.kind in "iubf":
        arr = arr.astype(like.dtype, copy=False)
    return arr


def _wrap(x, like=None) -> "Tensor":
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_array(x, like.data if like is not None else None))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if arr.dtype.kind in "iub" and requires_grad:
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self.tape_id = None
        self._tape = None
        self.name = name

    # -- introspection
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return apply("astype", self, dtype=dtype)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # -- arithmetic
    def __add__(self, other):
        return apply("add", self, _wrap(other, self))

    def __radd__(self, other):
        return apply("add", _wrap(other, self), self)

    def __sub__(self, other):
        return apply("sub", self, _wrap(other, self))

    def __rsub__(self, other):
        return apply("sub", _wrap(other, self), self)

    def __mul__(self, other):
        return apply("mul", self, _wrap(other, self))

    def __rmul__(self, other):
        return apply("mul", _wrap(other, self), self)

    def __truediv__(self, other):
        return apply("div", self, _wrap(other, self))

    def __rtruediv__(self, other):
        return apply("div", _wrap(other, self), self)

    def __neg__(self):
        return apply("neg", self)

    def __pow__(self, exponent):
        return apply("pow", self, exponent=exponent)

    def __matmul__(self, other):
        return apply("matmul", self, _wrap(other, self))

    def __getitem__(self, index):
        return apply("slice", self, index=index)

    # -- named ops
    def div(self, other, eps=None):
        return apply("div", self, _wrap(other, self), eps=eps)

    def exp(self):
        return apply("exp", self)

    def log(self, eps=None):
        return apply("log", self, eps=eps)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False):
        return apply("max", self, axis=axis, keepdims=keepdims)

    def min(self, axis=None, keepdims=False):
        return apply("min", self, axis=axis, keepdims=keepdims)

    def l2_normalize(self, axis=-1):
        return apply("l2_normalize", self, axis=axis)

    def softmax(self, axis=-1):
        return apply("softmax", self, axis=axis)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply("transpose", self, axes=axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return apply("transpose", self, axes=tuple(axes))

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", self, shape=shape)

    def broadcast_to(self, shape):
        return apply("broadcast", self, shape=tuple(shape))

    def clip(self, lo, hi):
        return apply("clip", self, lo=lo, hi=hi)

    def gelu(self):
        return apply("gelu", self)

    def layer_norm(self, gain, bias, eps=1e-5):
        return apply("layer_norm", self, gain, bias, eps=eps)


def tensor(data, requires_grad=False, dtype=np.float32, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


# --------------------------------------------------------------------------
# forward rules and vector-Jacobian products


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a, b, kind):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


def _expand(g, axis, keepdims, ndim):
    if axis is None or keepdims:
        return g
    axes = (axis,) if isinstance(axis, int) else axis
    axes = sorted(a % ndim for a in axes)
    for a in axes:
        g = np.expand_dims(g, a)
    return g


def _op_add(a, b):
    _check_broadcast(a, b, "add")
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _op_sub(a, b):
    _check_broadcast(a, b, "sub")
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _op_mul(a, b):
    _check_broadcast(a, b, "mul")
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _op_div(a, b, eps=None):
    _check_broadcast(a, b, "div")
    if eps is None:
        if np.any(b == 0):
            raise DomainError("div: denominator has exact zeros and no epsilon guard was requested")
        den = b
        live = None
    else:
        den = np.maximum(b, eps)
        live = b >= eps
    out = a / den

    def vjp(g):
        ga = g / den
        gb = -g * out / den
        if live is not None:
            gb = np.where(live, gb, 0)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return out, vjp


def _op_neg(a):
    return -a, lambda g: (-g,)


def _op_pow(a, exponent):
    out = a**exponent
    return out, lambda g: (g * exponent * a ** (exponent - 1),)


def _op_exp(a):
    out = np.exp(a)
    return out, lambda g: (g * out,)


def _op_log(a, eps=None):
    if eps is None:
        if np.any(a == 0):
            raise DomainError("log: input has exact zeros and no epsilon guard was requested")
        x = a
        live = None
    else:
        x = np.maximum(a, eps)
        live = a >= eps
    out = np.log(x)

    def vjp(g):
        ga = g / x
        if live is not None:
            ga = np.where(live, ga, 0)
        return (ga,)

    return out, vjp


def _op_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeMismatch(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch(f"matmul: batch extents differ, {a.shape} @ {b.shape}") from None
    flat = b.ndim == 2 and a.ndim > 2
    # a stack of rows times one matrix is a single 2-D product
    out = (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + b.shape[-1:]) if flat else a @ b

    def vjp(g):
        if flat:
            ga = (g.reshape(-1, g.shape[-1]) @ b.T).reshape(a.shape)
        else:
            ga = g @ np.swapaxes(b, -1, -2)
        if b.ndim == 2:
            # fold batch axes into one product instead of summing per-item outer products
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = _unbroadcast(np.swapaxes(a, -1, -2) @ g, b.shape)
        return _unbroadcast(ga, a.shape), gb

    return out, vjp


def _op_sum(a, axis=None, keepdims=False):
    out = a.sum(axis=axis, keepdims=keepdims)
    return out, lambda g: (np.broadcast_to(_expand(g, axis, keepdims, a.ndim), a.shape).copy(),)


def _op_mean(a, axis=None, keepdims=False):
    out = a.mean(axis=axis, keepdims=keepdims)
    n = a.size // max(out.size, 1)
    return out, lambda g: (np.broadcast_to(_expand(g, axis, keepdims, a.ndim) / n, a.shape).copy(),)


def _extremum(a, axis, keepdims, argfn, kind):
    if axis is None:
        flat = a.reshape(-1)
        idx = argfn(flat)
        out = flat[idx]
        if keepdims:
            out = out.reshape((1,) * a.ndim)
        if _state.extrema is not None:
            _state.extrema.append((kind, np.array(idx)))

        def vjp(g):
            ga = np.zeros(a.size, dtype=g.dtype)
            ga[idx] = np.asarray(g).reshape(())
            return (ga.reshape(a.shape),)

        return np.asarray(out), vjp

    ax = axis % a.ndim
    idx = np.expand_dims(argfn(a, axis=ax), ax)
    out = np.take_along_axis(a, idx, axis=ax)
    if _state.extrema is not None:
        _state.extrema.append((kind, idx.copy()))
    if not keepdims:
        out = np.squeeze(out, axis=ax)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(ga, idx, gk, axis=ax)
        return (ga,)

    return out, vjp


def _op_max(a, axis=None, keepdims=False):
    return _extremum(a, axis, keepdims, np.argmax, "max")


def _op_min(a, axis=None, keepdims=False):
    return _extremum(a, axis, keepdims, np.argmin, "min")


def _op_l2_normalize(a, axis=-1):
    norm = np.sqrt((a * a).sum(axis=axis, keepdims=True))
    degenerate = norm < NORM_GUARD
    safe = np.where(degenerate, 1, norm)
    out = a / safe
    if np.any(degenerate):
        e1 = np.zeros_like(a)
        first = [slice(None)] * a.ndim
        first[axis] = slice(0, 1)
        e1[tuple(first)] = 1
        out = np.where(degenerate, e1, out)

    def vjp(g):
        ga = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(degenerate, 0, ga),)

    return out, vjp


def _op_concat(*arrays, axis=0):
    ranks = {x.ndim for x in arrays}
    if len(ranks) != 1:
        raise ShapeMismatch("concat: operands differ in rank")
    ax = axis % arrays[0].ndim
    for x in arrays[1:]:
        if x.shape[:ax] + x.shape[ax + 1 :] != arrays[0].shape[:ax] + arrays[0].shape[ax + 1 :]:
            raise ShapeMismatch(f"concat: shapes {arrays[0].shape} and {x.shape} disagree off axis {axis}")
    out = np.concatenate(arrays, axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrays])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(arrays))
        )

    return out, vjp


def _is_basic(index):
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def _op_slice(a, index):
    out = a[index]
    basic = _is_basic(index)

    def vjp(g):
        ga = np.zeros(a.shape, dtype=g.dtype)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)

    return np.array(out, copy=True), vjp


def _op_transpose(a, axes=None):
    out = np.transpose(a, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return out, lambda g: (np.transpose(g, inv),)


def _op_reshape(a, shape):
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"reshape: cannot view {a.shape} as {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _op_broadcast(a, shape):
    try:
        out = np.broadcast_to(a, shape).copy()
    except ValueError:
        raise ShapeMismatch(f"broadcast: {a.shape} does not broadcast to {shape}") from None
    return out, lambda g: (_unbroadcast(g, a.shape),)


def _op_softmax(a, axis=-1):
    z = a - a.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _op_where(a, b, cond):
    out = np.where(cond, a, b)

    def vjp(g):
        return (
            _unbroadcast(np.where(cond, g, 0), a.shape),
            _unbroadcast(np.where(cond, 0, g), b.shape),
        )

    return out, vjp


def _op_clip(a, lo, hi):
    out = np.clip(a, lo, hi)
    inside = (a >= lo) & (a <= hi)
    return out, lambda g: (np.where(inside, g, 0),)


_GELU_C = float(np.sqrt(2.0 / np.pi))


def _op_gelu(a):
    # tanh approximation
    a2 = a * a
    th = a2 * 0.044715
    th += 1.0
    th *= a
    th *= _GELU_C
    np.tanh(th, out=th)
    half = th + 1.0
    half *= 0.5
    out = a * half

    def vjp(g):
        du = a2 * (3 * 0.044715)
        du += 1.0
        du *= _GELU_C
        sech2 = 1.0 - th * th
        sech2 *= 0.5
        sech2 *= a
        sech2 *= du
        sech2 += half
        return (g * sech2,)

    return out, vjp


def _op_layer_norm(x, gain, bias, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain + bias

    def vjp(g):
        gx_hat = g * gain
        n = x.shape[-1]
        gx = rstd / n * (
            n * gx_hat - gx_hat.sum(-1, keepdims=True) - xhat * (gx_hat * xhat).sum(-1, keepdims=True)
        )
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return out, vjp


def _op_astype(a, dtype):
    return a.astype(dtype), lambda g: (g.astype(a.dtype),)


_RULES = {
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "div": _op_div,
    "neg": _op_neg,
    "pow": _op_pow,
    "exp": _op_exp,
    "log": _op_log,
    "matmul": _op_matmul,
    "sum": _op_sum,
    "mean": _op_mean,
    "max": _op_max,
    "min": _op_min,
    "l2_normalize": _op_l2_normalize,
    "concat": _op_concat,
    "slice": _op_slice,
    "transpose": _op_transpose,
    "reshape": _op_reshape,
    "broadcast": _op_broadcast,
    "softmax": _op_softmax,
    "where": _op_where,
    "clip": _op_clip,
    "gelu": _op_gelu,
    "layer_norm": _op_layer_norm,
    "astype": _op_astype,
}


def apply(op_kind: str, *inputs: Tensor, **params) -> Tensor:
    """Evaluate ``op_kind`` on ``inputs`` and record it on the active tape."""
    try:
        rule = _RULES[op_kind]
    except KeyError:
        raise ValueError(f"unknown op {op_kind!r}") from None
    data, vjp = rule(*(t.data for t in inputs), **params)
    out = Tensor(data)
    if _state.grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        Tape.current().record(op_kind, inputs, out, vjp)
    return out


def concat(tensors: Sequence[Tensor], axis=0) -> Tensor:
    return apply("concat", *tensors, axis=axis)


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else ``b``; ``cond`` is a constant mask."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    ref = a if isinstance(a, Tensor) else b
    a, b = _wrap(a, ref), _wrap(b, ref)
    return apply("where", a, b, cond=cond)


def logsumexp(x: Tensor, axis=-1, keepdims=False) -> Tensor:
    m = x.detach().max(axis=axis, keepdims=True)
    out = (x - m).exp().sum(axis=axis, keepdims=True).log() + m
    if not keepdims:
        out = out.reshape(tuple(n for i, n in enumerate(out.shape) if i != axis % x.ndim))
    return out



# --------------------------------------------------------------------------
# backward


def backward(loss: Tensor, grad=None) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate across calls until reset with ``zero_grad``.
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise DetachedTensor("loss is not on a tape (no input required grad, or recorded under no_grad)")
    tape = loss._tape
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype).reshape(loss.shape)
    grads = {id(loss): seed}
    for idx in range(loss.tape_id, -1, -1):
        node = tape.nodes[idx]
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._tape is None:
                gi = np.asarray(gi, dtype=inp.dtype)
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


# --------------------------------------------------------------------------
# finite-difference check


@dataclass
class GradCheckResult:
    max_rel_error: float
    skipped: list = field(default_factory=list)

    def __float__(self):
        return self.max_rel_error


def _selections(fn, xs):
    with no_grad(), _record_extrema() as log:
        val = float(np.asarray(fn(*xs).data).reshape(()))
    return val, [idx for _, idx in log]


def _same_selection(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(f, x, h: float = 1e-5, strict: bool = False) -> GradCheckResult:
    """Compare reverse-mode gradients with central differences in float64.

    ``x`` is a Tensor or a sequence of Tensors; ``f`` receives the same
    structure (as float64 leaves) and must return a scalar Tensor.  The
    error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    Coordinates whose ±h perturbation changes which entry a min/max picks
    are skipped and listed in ``skipped``; with ``strict`` they raise
    :class:`TiedExtremum` instead.
    """
    single = isinstance(x, Tensor)
    xs = [x] if single else list(x)
    base = [np.array(t.data, dtype=np.float64) for t in xs]

    def fn(*arrays):
        leaves = [Tensor(a) for a in arrays]
        return f(leaves[0]) if single else f(leaves)

    leaves = [Tensor(a.copy(), requires_grad=True) for a in base]
    with Tape():
        y = f(leaves[0]) if single else f(leaves)
        backward(y)
    analytic = [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(base, leaves)]

    _, sel0 = _selections(fn, base)
    worst = 0.0
    skipped = []
    for k, a in enumerate(base):
        for j in np.ndindex(a.shape):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[k][j] += h
            minus[k][j] -= h
            fp, sp = _selections(fn, plus)
            fm, sm = _selections(fn, minus)
            if not (_same_selection(sel0, sp) and _same_selection(sel0, sm)):
                skipped.append((k, j) if not single else j)
                continue
            num = (fp - fm) / (2 * h)
            ana = analytic[k][j]
            worst = max(worst, abs(ana - num) / max(1.0, abs(ana)))
    if strict and skipped:
        raise TiedExtremum(f"min/max ties near coordinates {skipped}")
    return GradCheckResult(worst, skipped)
