"""Minimal dense-tensor engine with define-by-run reverse-mode differentiation.

Every differentiable op produces a new :class:`Tensor` that remembers its
parents and a closure mapping the output adjoint to parent adjoints. Calling
:func:`backward` on a scalar linearizes the graph into a :class:`Tape`
(topological order), replays the adjoints in reverse and then releases the
graph, so a second backward over the same region is a lifecycle error.
"""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericError, TapeError

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_CHECK_FINITE = True

NORM_EPS = 1e-6


def default_dtype():
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype."""
    old = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    old = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = old


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "_consumed", "_op")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self._op = "leaf"

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg}, op={self._op})"

    # -- operator sugar --------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents: Sequence[Tensor], backward: Callable, op: str = "custom") -> Tensor:
    """Wrap a forward result and its adjoint rule as a graph node.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    if _CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise NumericError(f"non-finite values produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._consumed = False
    out._op = op
    out.requires_grad = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return make_op(ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = a.dtype.type(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / np.sqrt(2.0)))
    out = (xd * cdf).astype(xd.dtype, copy=False)

    def bw(g):
        pdf = np.exp(-0.5 * xd * xd) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype, copy=False),)

    return make_op(out, (x,), bw, "gelu")


def softmax(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return make_op(s, (x,), bw, "softmax")


def smooth_l1(d, beta: float) -> Tensor:
    """Elementwise ``0.5*d**2/beta`` inside ``|d| <= beta``, ``|d| - beta/2`` outside."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = as_tensor(d)
    dd = d.data
    ad = np.abs(dd)
    inside = ad <= beta
    out = np.where(inside, 0.5 * dd * dd / beta, ad - 0.5 * beta).astype(dd.dtype, copy=False)

    def bw(g):
        return ((g * np.where(inside, dd / beta, np.sign(dd))).astype(dd.dtype, copy=False),)

    return make_op(out, (d,), bw, "smooth_l1")


def detach(x) -> Tensor:
    x = as_tensor(x)
    return Tensor(x.data, requires_grad=False)


# -- reductions / shape ----------------------------------------------------

def tsum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(out, (x,), bw, "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))
    inv = x.dtype.type(1.0 / count)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g * inv, shape).copy(),)

    return make_op(out, (x,), bw, "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return make_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def index(x, key) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        out = np.zeros(shape, dtype=dtype)
        out[key] = g
        return (out,)

    return make_op(x.data[key], (x,), bw, "index")


def concat(tensors: Sequence, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_op(out, tensors, bw, "concat")


def gather_rows(x, idx) -> Tensor:
    """Select rows (axis -2) of ``x``.

    ``idx`` is either a 1-D index array shared by every leading batch entry,
    or a 2-D ``(B, T')`` array selecting per batch entry from ``x`` of shape
    ``(B, T, D)``.
    """
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.intp)
    if x.ndim < 2:
        raise DimensionError("gather_rows needs at least 2-D input")
    n = x.shape[-2]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    shape, dtype = x.shape, x.dtype
    if idx.ndim == 1:
        out = x.data[..., idx, :]

        def bw(g):
            gx = np.zeros(shape, dtype=dtype)
            np.add.at(gx, (..., idx, slice(None)), g)
            return (gx,)
    elif idx.ndim == 2:
        if x.ndim != 3 or idx.shape[0] != shape[0]:
            raise DimensionError(f"gather_rows: batched index {idx.shape} incompatible with {shape}")
        rows = np.arange(shape[0])[:, None]
        out = x.data[rows, idx]

        def bw(g):
            gx = np.zeros(shape, dtype=dtype)
            np.add.at(gx, (rows, idx), g)
            return (gx,)
    else:
        raise DimensionError("gather_rows index must be 1-D or 2-D")
    return make_op(out, (x,), bw, "gather_rows")


# -- linear algebra / normalization ---------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if b.ndim == 2 and g.ndim > 2:
            # shared weight: collapse leading axes into one GEMM
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_op(ad @ bd, (a, b), bw, "matmul")


def linear(x, weight, bias=None) -> Tensor:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def layer_norm(x, gain=None, bias=None, eps: float = NORM_EPS) -> Tensor:
    """Standardize over the last axis, then apply the optional affine map."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = as_tensor(x)
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm: parameter shape {p.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data
    parents = [x] + [p for p in (gain, bias) if p is not None]

    def bw(g):
        gx_hat = g * gain.data if gain is not None else g
        gx = rstd * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                     - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(g.ndim - 1))
        if gain is not None:
            grads.append((g * xhat).sum(axis=lead))
        if bias is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make_op(out, parents, bw, "layer_norm")


# -- backward driver -------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered record of the ops reachable from one scalar."""

    nodes: list = field(default_factory=list)
    consumed: bool = False

    @classmethod
    def record(cls, root: Tensor) -> "Tape":
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
        return cls(order)

    def replay(self, seed_grad) -> None:
        if self.consumed:
            raise TapeError("tape already consumed; re-run the forward pass")
        root = self.nodes[-1]
        root.grad = seed_grad
        for node in reversed(self.nodes):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for p, g in zip(node._parents, grads):
                if g is None or not p.requires_grad:
                    continue
                g = np.asarray(g, dtype=p.dtype)
                if p.grad is None:
                    p.grad = g
                else:
                    p.grad = p.grad + g
        self.consumed = True
        for node in self.nodes:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True


def backward(loss: Tensor) -> Tape:
    """Propagate adjoints from a scalar ``loss`` to every reachable leaf."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("backward already ran over this graph")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor requiring grad")
    tape = Tape.record(loss)
    tape.replay(np.ones(loss.shape, dtype=loss.dtype))
    return tape


# -- finite-difference verification ----------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    per_tensor: dict

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def __str__(self):
        worst = max(self.per_tensor, key=self.per_tensor.get) if self.per_tensor else "-"
        status = "PASS" if self.passed else "FAIL"
        return f"grad_check {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g}, worst {worst})"


def grad_check(f: Callable[[], Tensor], inputs, tol: float = 1e-4, step: float = 1e-5,
               max_coords: int | None = None, rng=None, atol: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``inputs`` is a Tensor, a sequence of Tensors or a name->Tensor mapping;
    each must be float64 and is perturbed in place. The error of a tensor is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, atol)``.
    With ``max_coords`` only that many random coordinates per tensor are
    probed.
    """
    if isinstance(inputs, Tensor):
        named = {"x": inputs}
    elif isinstance(inputs, dict):
        named = dict(inputs)
    else:
        named = {f"x{i}": t for i, t in enumerate(inputs)}
    for name, t in named.items():
        if t.dtype != np.float64:
            raise ValueError(f"grad_check requires float64 inputs ({name} is {t.dtype})")
        t.requires_grad = True
        t.grad = None
    rng = rng if rng is not None else np.random.default_rng(0)

    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("objective is non-finite at the check point")
    backward(loss)
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for n, t in named.items()}

    def value():
        with no_grad():
            v = float(f().data)
        if not np.isfinite(v):
            raise NumericError("objective became non-finite under perturbation")
        return v

    per = {}
    for name, t in named.items():
        flat = t.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        num = np.empty(len(coords))
        for j, c in enumerate(coords):
            orig = flat[c]
            h = step * max(1.0, abs(orig))
            flat[c] = orig + h
            fp = value()
            flat[c] = orig - h
            fm = value()
            flat[c] = orig
            num[j] = (fp - fm) / (2 * h)
        ana = analytic[name].reshape(-1)[coords]
        denom = max(np.abs(ana).max(initial=0.0), np.abs(num).max(initial=0.0), atol)
        per[name] = float(np.abs(ana - num).max(initial=0.0) / denom)
    return GradCheckReport(max(per.values(), default=0.0), tol, per)
