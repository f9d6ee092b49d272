"""Dense float64 tensors with reverse-mode automatic differentiation.

Every tensor wraps a C-contiguous ``numpy.float64`` array.  Operations that
involve at least one tensor with ``requires_grad`` record a node holding the
parent tensors and a closure that maps the output gradient to parent
gradients.  :meth:`Tensor.backward` walks those nodes in reverse topological
order exactly once.

Broadcasting is deliberately narrow: operands must have equal shapes, or one
of them must be a scalar, or the shape of one must be a trailing suffix of the
other (a batch of rows against one shared row).  Anything else raises
:class:`ShapeError`.
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "GraphError",
    "tensor",
    "no_grad",
    "make_rng",
    "gaussian_sample",
    "add",
    "sub",
    "mul",
    "scale",
    "exp",
    "log",
    "relu",
    "square",
    "sqrt",
    "clamp",
    "tsum",
    "mean",
    "matmul",
    "softmax",
    "layer_norm",
    "linear",
    "attend",
    "reshape",
    "transpose",
    "swap_last",
    "gather_rows",
    "put_rows",
    "broadcast_rows",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside the domain of a function (log/sqrt of negatives)."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity appeared in a tensor."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, reused graph)."""


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data) -> np.ndarray:
    # np.ascontiguousarray would promote 0-d arrays to 1-d
    arr = np.asarray(data, dtype=np.float64)
    return arr if arr.flags.c_contiguous else arr.copy(order="C")


def _check_finite(arr: np.ndarray, what: str) -> None:
    # a single reduction propagates any NaN/inf; cheaper than isfinite().all()
    if arr.size and not np.isfinite(arr.sum()):
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values produced by {what}")


class Tensor:
    """An n-dimensional float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_spent")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = _as_array(data)
        _check_finite(arr, name or "constructor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._spent = False

    # -- basic properties ------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        out._parents = ()
        out._backward = None
        out._spent = False
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff ----------------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from self.

        The graph is consumed: a second call on the same loss raises
        :class:`GraphError`.
        """
        if self.data.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._spent:
            raise GraphError("backward() already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise GraphError("loss is detached from any tensor that requires grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, f"gradient of {node.name or 'leaf'}")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._spent = True
            # release closures so intermediate activations can be freed
            node._backward = _spent_backward
            node._parents = ()
        self._spent = True

    # -- operator sugar ----------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _spent_backward(g):
    raise GraphError("graph already consumed by backward()")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Iterable[Tensor], backward, what: str,
          check: bool = False) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = _as_array(data)
    if check:
        _check_finite(out.data, what)
    out.grad = None
    out.name = None
    out._spent = False
    parents = tuple(parents)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- broadcasting -----------------------------------------------------------
def _check_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or len(a) == 0 or len(b) == 0:
        return
    if int(np.prod(a)) == 1 or int(np.prod(b)) == 1:
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{op}: cannot combine shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.full(shape, g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


# -- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
                 "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError
        y = np.exp(a.data)
    return _make(y, (a,), lambda g: (g * y,), "exp", check=True)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    x = a.data
    return _make(np.log(x), (a,), lambda g: (g / x,), "log", check=True)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def square(a: Tensor) -> Tensor:
    x = a.data
    return _make(x * x, (a,), lambda g: (2.0 * g * x,), "square")


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise DomainError("sqrt of negative value")
    y = np.sqrt(a.data)

    def back(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            return (np.where(y > 0, g / (2.0 * np.where(y > 0, y, 1.0)), 0.0),)

    return _make(y, (a,), back, "sqrt", check=True)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to ``[lo, hi]``; gradient is zero where clipping was active."""
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


# -- reductions -------------------------------------------------------------
def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(out))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(tsum(a, axis=axes, keepdims=keepdims), 1.0 / n)


# -- linear algebra ---------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``[..., m, k]``; ``b`` is either a shared ``[k, n]`` matrix or has
    the same leading batch axes as ``a``.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs at least 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if b.ndim == 2 and ad.ndim > 2:
        k = ad.shape[-1]
        flat = ad.reshape(-1, k)
        out = (flat @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb
    else:
        out = ad @ bd

        def back(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _make(out, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``[in, out]``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    flat = xd.reshape(-1, xd.shape[-1])
    out = flat @ wd
    if bias is not None:
        out += bias.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = flat.T @ g2 if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back, "linear")


def attend(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Fused ``softmax(q k^T / sqrt(d_k)) v`` over the last two axes.

    ``q`` may have fewer rows than ``k``/``v``; leading axes must agree.
    """
    if q.shape[-1] != k.shape[-1] or k.shape != v.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attend: incompatible shapes q={q.shape}, k={k.shape}, v={v.shape}")
    c = 1.0 / np.sqrt(q.shape[-1])
    qd, kd, vd = q.data, k.data, v.data
    s = qd @ np.swapaxes(kd, -1, -2)
    s *= c
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    prob = s
    out = prob @ vd

    def back(g):
        gv = np.swapaxes(prob, -1, -2) @ g if v.requires_grad else None
        dp = g @ np.swapaxes(vd, -1, -2)
        # row sums of dp * prob equal g . out
        dp -= (g * out).sum(axis=-1, keepdims=True)
        dp *= prob
        dp *= c
        gq = dp @ kd if q.requires_grad else None
        gk = np.swapaxes(dp, -1, -2) @ qd if k.requires_grad else None
        return gq, gk, gv

    return _make(out, (q, k, v), back, "attend", check=True)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    ax = _norm_axis(axis, a.ndim)[0]
    z = a.data - a.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return _make(y, (a,), back, "softmax", check=True)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each trailing-axis slice to zero mean and unit variance, then
    apply ``gain`` and ``bias``."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: feature size {d} vs gain {gain.shape}, bias {bias.shape}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data

    def back(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        gbias = g.sum(axis=lead) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), back, "layer_norm")


# -- shape manipulation -----------------------------------------------------
def reshape(a: Tensor, shape: tuple) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: tuple) -> Tensor:
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    return transpose(a, axes)


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows along axis -2: ``a[..., idx[..., j], :]``.

    ``idx`` has the leading shape of ``a`` with the row axis replaced by the
    number of selected rows.
    """
    idx = np.asarray(idx, dtype=np.intp)
    full = idx[..., None]
    out = np.take_along_axis(a.data, full, axis=-2)
    shape = a.shape

    def back(g):
        ga = np.zeros(shape)
        np.put_along_axis(ga, full, g, axis=-2)  # indices are distinct per slice
        return (ga,)

    return _make(out, (a,), back, "gather_rows")


def put_rows(base: Tensor, idx: np.ndarray, rows: Tensor) -> Tensor:
    """Copy of ``base`` with rows ``idx`` (axis -2) replaced by ``rows``."""
    idx = np.asarray(idx, dtype=np.intp)
    full = idx[..., None]
    out = base.data.copy()
    np.put_along_axis(out, full, rows.data, axis=-2)

    def back(g):
        gb = None
        if base.requires_grad:
            gb = g.copy()
            np.put_along_axis(gb, full, 0.0, axis=-2)
        gr = np.take_along_axis(g, full, axis=-2) if rows.requires_grad else None
        return gb, gr

    return _make(out, (base, rows), back, "put_rows")


def broadcast_rows(a: Tensor, n: int) -> Tensor:
    """Repeat a ``[..., 1, d]`` tensor ``n`` times along axis -2."""
    if a.shape[-2] != 1:
        raise ShapeError(f"broadcast_rows needs a singleton row axis, got {a.shape}")
    shape = a.shape[:-2] + (n, a.shape[-1])
    return _make(np.broadcast_to(a.data, shape), (a,),
                 lambda g: (g.sum(axis=-2, keepdims=True),), "broadcast_rows")


# -- randomness -------------------------------------------------------------
def make_rng(seed: int) -> np.random.Generator:
    """Counter-based Philox-4x64 stream keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def gaussian_sample(shape, rng: np.random.Generator) -> Tensor:
    """I.i.d. standard normal draws as a constant tensor."""
    return Tensor(rng.standard_normal(tuple(shape)))
