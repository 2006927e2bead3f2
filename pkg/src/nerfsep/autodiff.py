"""Reverse-mode automatic differentiation on numpy arrays.

A small tape: every operation on grad-requiring tensors records its parents
and a vector-Jacobian-product closure. ``backward`` walks the recorded graph
once in reverse creation order and returns a gradient per reachable tensor.

The primitive set is deliberately small (elementwise arithmetic, matmul,
reductions, exp/log/sin/cos, relu, clip, pow, reshape/repeat, concat,
gather); everything else in the package is composed from these so that the
finite-difference suite in the tests audits the entire gradient surface.

Operations on tensors that do not require gradients never touch the tape,
so constants (sample positions, targets, spacings) are free.
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

_COUNTER = itertools.count()
_GRAD_ENABLED = [True]


@contextmanager
def no_grad():
    """Disable tape recording inside the block (forward evaluation only)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def grad_enabled() -> bool:
    return _GRAD_ENABLED[-1]


class Tensor:
    """A numpy array plus the tape record that produced it."""

    __slots__ = ("data", "requires_grad", "op", "parents", "vjp", "idx")

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf",
                 parents: tuple = (), vjp: Callable | None = None):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.idx = next(_COUNTER)

    # -- introspection ----------------------------------------------------

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
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return self.data.item()

    def numpy(self) -> np.ndarray:
        """Detached value (a view; callers must not mutate)."""
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op!r}, shape={self.shape}, grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and not isinstance(shape[0], int):
            shape = shape[0]
        return reshape(self, shape)


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.asarray(data), requires_grad=True, op="param")


def constant(data, dtype=None) -> Tensor:
    arr = np.asarray(data, dtype=dtype)
    return Tensor(arr)


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    """Wrap operands, casting non-tensor constants to the tensor's dtype."""
    if isinstance(a, Tensor):
        if isinstance(b, Tensor):
            return a, b
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    return Tensor(np.asarray(a)), Tensor(np.asarray(b))


def _node(data: np.ndarray, op: str, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, op=op, parents=tuple(parents), vjp=vjp)
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcasted gradient back to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(out, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def vjp(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, "div", (a, b), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """2-D or stacked (batched) matrix product with numpy semantics."""
    a, b = _pair(a, b)
    out = a.data @ b.data

    def vjp(g):
        bd, ad = b.data, a.data
        bt = np.swapaxes(bd, -1, -2) if bd.ndim >= 2 else bd
        at = np.swapaxes(ad, -1, -2) if ad.ndim >= 2 else ad
        if ad.ndim == 1:  # (k,) @ (..., k, n)
            ga = _unbroadcast(g[..., None, :] @ bt, ad.shape).reshape(ad.shape)
            gb = _unbroadcast(ad[:, None] * g[..., None, :], bd.shape)
            return ga, gb
        if bd.ndim == 1:  # (..., m, k) @ (k,)
            ga = _unbroadcast(g[..., :, None] * bd, ad.shape)
            gb = _unbroadcast(at @ g[..., :, None], bd.shape).reshape(bd.shape)
            return ga, gb
        ga = _unbroadcast(g @ bt, ad.shape)
        gb = _unbroadcast(at @ g, bd.shape)
        return ga, gb

    return _node(out, "matmul", (a, b), vjp)


# -- reductions ---------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(shape) for a in axes)
        for a in sorted(axes):
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_expand_reduced(g, x.shape, axis, keepdims).copy(),)

    return _node(out, "sum", (x,), vjp)


def tmean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _wrap(x)
    out = x.data.mean(axis=axis, keepdims=keepdims)
    denom = x.size / max(out.size, 1)

    def vjp(g):
        return (_expand_reduced(g, x.shape, axis, keepdims) / denom,)

    return _node(out, "mean", (x,), vjp)


# -- transcendental / nonlinear ----------------------------------------------

def exp(x) -> Tensor:
    x = _wrap(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return _node(out, "exp", (x,), vjp)


def log(x) -> Tensor:
    x = _wrap(x)
    out = np.log(x.data)

    def vjp(g):
        return (g / x.data,)

    return _node(out, "log", (x,), vjp)


def sin(x) -> Tensor:
    x = _wrap(x)
    out = np.sin(x.data)

    def vjp(g):
        return (g * np.cos(x.data),)

    return _node(out, "sin", (x,), vjp)


def cos(x) -> Tensor:
    x = _wrap(x)
    out = np.cos(x.data)

    def vjp(g):
        return (g * -np.sin(x.data),)

    return _node(out, "cos", (x,), vjp)


def relu(x) -> Tensor:
    x = _wrap(x)
    out = np.maximum(x.data, 0)

    def vjp(g):
        return (g * (x.data > 0),)

    return _node(out, "relu", (x,), vjp)


def clip(x, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is identity inside (boundaries included)."""
    x = _wrap(x)
    out = np.clip(x.data, lo, hi)

    def vjp(g):
        mask = (x.data >= lo) & (x.data <= hi)
        return (g * mask,)

    return _node(out, "clip", (x,), vjp)


def power(x, p: float) -> Tensor:
    """x**p for a constant exponent."""
    x = _wrap(x)
    out = x.data ** p

    def vjp(g):
        return (g * p * x.data ** (p - 1.0),)

    return _node(out, "pow", (x,), vjp)


def sqrt(x) -> Tensor:
    return power(x, 0.5)


# -- shape adaptation ---------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    x = _wrap(x)
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(x.shape),)

    return _node(out, "reshape", (x,), vjp)


def repeat_rows(x: Tensor, k: int) -> Tensor:
    """Repeat each leading row k times: (B, ...) -> (B*k, ...)."""
    x = _wrap(x)
    out = np.repeat(x.data, k, axis=0)

    def vjp(g):
        return (g.reshape(x.shape[0], k, *x.shape[1:]).sum(axis=1),)

    return _node(out, "repeat_rows", (x,), vjp)


def concat(parts: Iterable[Tensor], axis: int = -1) -> Tensor:
    parts = [_wrap(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        g = np.moveaxis(g, axis, 0)
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            grads.append(np.moveaxis(g[lo:hi], 0, axis))
        return tuple(grads)

    return _node(out, "concat", tuple(parts), vjp)


def gather(x: Tensor, idx, axis: int = 0) -> Tensor:
    """Take rows (or slices along ``axis``) by integer index; scatter-add vjp."""
    x = _wrap(x)
    idx = np.asarray(idx)
    out = np.take(x.data, idx, axis=axis)

    def vjp(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gm = np.moveaxis(gx, axis, 0)
        np.add.at(gm, idx, np.moveaxis(g, axis, 0))
        return (gx,)

    return _node(out, "gather", (x,), vjp)


# -- compositions used throughout the fields/losses ---------------------------

def sigmoid(x: Tensor) -> Tensor:
    # Pre-clip keeps exp in range for float32; |x|>30 is saturated anyway.
    xc = clip(x, -30.0, 30.0)
    return div(1.0, add(1.0, exp(-xc)))


def softplus(x: Tensor) -> Tensor:
    xc = clip(x, -30.0, 30.0)
    soft = log(add(1.0, exp(xc)))
    return add(soft, relu(sub(x, 30.0)))


# -- backward ------------------------------------------------------------------

def backward(output: Tensor, *, check_nan: bool = False) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar output w.r.t. every reachable tensor.

    Visits each recorded node exactly once in reverse creation order.
    With ``check_nan`` every propagated gradient is scanned and the first
    non-finite one raises, naming the op that produced it.
    """
    if output.size != 1:
        raise ValueError(f"backward requires a scalar output, got shape {output.shape}")
    if not output.requires_grad:
        return {}

    reachable: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        t = stack.pop()
        if t.idx in reachable:
            continue
        reachable[t.idx] = t
        for p in t.parents:
            if p.requires_grad and p.idx not in reachable:
                stack.append(p)

    grads: dict[Tensor, np.ndarray] = {output: np.ones_like(output.data)}
    for t in sorted(reachable.values(), key=lambda t: t.idx, reverse=True):
        g = grads.get(t)
        if g is None or t.vjp is None:
            continue
        parent_grads = t.vjp(g)
        for p, gp in zip(t.parents, parent_grads):
            if not p.requires_grad or gp is None:
                continue
            if check_nan and not np.all(np.isfinite(gp)):
                raise FloatingPointError(
                    f"non-finite gradient flowing into {p.op!r} node from {t.op!r} node")
            acc = grads.get(p)
            grads[p] = gp if acc is None else acc + gp
    return grads


def finite_difference_check(f: Callable[[], Tensor],
                            params: dict[str, Tensor],
                            h: float = 1e-5) -> float:
    """Max relative error between analytic gradients of ``f`` and central differences.

    ``f`` must be a deterministic scalar function of the current values of
    ``params`` (re-evaluated several times; perturbations happen in place).
    Relative error uses max(|analytic|, |numeric|, 1e-8) as the denominator.
    """
    out = f()
    if out.size != 1:
        raise ValueError("finite_difference_check requires a scalar function")
    grads = backward(out)
    max_rel = 0.0
    for name, p in params.items():
        analytic = grads.get(p)
        if analytic is None:
            analytic = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f_hi = f().data.item()
            flat[i] = orig - h
            with no_grad():
                f_lo = f().data.item()
            flat[i] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise FloatingPointError(
                    f"function non-finite at perturbed point {name}[{i}]")
            numeric = (f_hi - f_lo) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)
    return max_rel
