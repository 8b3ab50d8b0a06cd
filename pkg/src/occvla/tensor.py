"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a row-major numpy array (``float32`` or ``float64``)
and, when gradients are being tracked, records the operation that produced it
together with references to its parents.  :func:`backward` walks that lineage
graph in reverse topological order.

Only leaf tensors (parameters and inputs created with ``requires_grad=True``)
and tensors on which :meth:`Tensor.retain_grad` was called keep a ``grad``
buffer; gradients accumulate across :func:`backward` calls until
:meth:`Tensor.zero_grad` is called.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DTypeError, NumericDomainError, ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)


@contextlib.contextmanager
def no_grad():
    """Disable lineage recording inside the block."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def grad_enabled() -> bool:
    return _grad_enabled.get()


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward", "_retain")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            if dtype is not None:
                raise DTypeError(f"unsupported dtype {arr.dtype}")
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._retain = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def retain_grad(self) -> Tensor:
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def parents(self) -> tuple[Tensor, ...]:
        return self._parents

    # -- operator sugar ---------------------------------------------------
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
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported; multiply by a constant")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def astype(self, dtype):
        return astype(self, dtype)


def _raise_item(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


# -- construction helpers ---------------------------------------------------

def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float32, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _check_same_dtype(op: str, a: Tensor, b: Tensor) -> None:
    if a.dtype != b.dtype:
        raise DTypeError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- backward ---------------------------------------------------------------

def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every reachable leaf ``x``."""
    if loss.size != 1 and grad is None:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor without autodiff lineage")
    seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for node in reversed(_topological_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None or node._retain:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            prev = grads.get(key)
            grads[key] = pg if prev is None else prev + pg


# -- elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same_dtype("add", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same_dtype("sub", a, b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor) and np.ndim(a) == 0:
        return scale(b, float(a))
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return scale(a, float(b))
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    _check_same_dtype("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _result(ad * bd, (a, b), bw, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c_arr = x.dtype.type(c)

    def bw(g):
        return (g * c_arr,)

    return _result(x.data * c_arr, (x,), bw, "scale")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return _result(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericDomainError("log of a non-positive value")
    xd = x.data

    def bw(g):
        return (g / xd,)

    return _result(np.log(xd), (x,), bw, "log")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    c = xd.dtype.type(_GELU_C)
    k = xd.dtype.type(0.044715)
    inner = c * (xd + k * xd * xd * xd)
    t = np.tanh(inner)
    half = xd.dtype.type(0.5)
    out = half * xd * (1 + t)

    def bw(g):
        x2 = xd * xd
        d = 1 - t * t
        d *= half * xd
        d *= c * (1 + 3 * k * x2)
        d += half * (1 + t)
        d *= g
        return (d,)

    return _result(out, (x,), bw, "gelu")


def astype(x: Tensor, dtype) -> Tensor:
    dtype = np.dtype(dtype)
    if dtype not in FLOAT_DTYPES:
        raise DTypeError(f"unsupported dtype {dtype}")
    src = x.dtype

    def bw(g):
        return (g.astype(src),)

    return _result(x.data.astype(dtype), (x,), bw, "astype")


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands with >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    _check_same_dtype("matmul", a, b)
    ad, bd = a.data, b.data
    # a stack times a 2-D weight is one large GEMM rather than a loop of small ones
    flat = bd.ndim == 2 and ad.ndim > 2

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if flat:
                ga = (g.reshape(-1, g.shape[-1]) @ bd.T).reshape(ad.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if bd.ndim == 2 and ad.ndim > 2:
                k = ad.shape[-1]
                gb = ad.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(ad.shape[:-1] + bd.shape[-1:]) if flat else ad @ bd
    return _result(out, (a, b), bw, "matmul")


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {src} into {tuple(shape)}") from exc

    def bw(g):
        return (g.reshape(src),)

    return _result(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _result(np.transpose(x.data, axes), (x,), bw, "transpose")


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a1], axes[a2] = axes[a2], axes[a1]
    return transpose(x, axes)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat of an empty list")
    for t in tensors[1:]:
        _check_same_dtype("concat", tensors[0], t)
    nd = tensors[0].ndim
    ax = axis % nd
    for t in tensors:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat shapes incompatible: {[u.shape for u in tensors]} on axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


def getitem(x: Tensor, key) -> Tensor:
    out = x.data[key]
    basic = _is_basic_index(key)
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return _result(np.array(out, copy=True) if basic else out, (x,), bw, "getitem")


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices of ``x`` along ``axis`` (indices may repeat)."""
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    if idx.size and (idx.min() < -x.shape[ax] or idx.max() >= x.shape[ax]):
        raise IndexError(f"take: index out of range for axis of size {x.shape[ax]}")
    shape, dtype = x.shape, x.dtype

    def bw(g):
        gx = np.zeros(shape, dtype=dtype)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return _result(np.take(x.data, idx, axis=ax), (x,), bw, "take")


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``; output shape ``ids.shape + (dim,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    n, dim = table.shape
    dtype = table.dtype

    def bw(g):
        gt = np.zeros((n, dim), dtype=dtype)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, dim))
        return (gt,)

    return _result(table.data[ids], (table,), bw, "embedding")


def pad(x: Tensor, widths) -> Tensor:
    """Zero padding; ``widths`` follows ``np.pad``'s per-axis ``(before, after)`` form."""
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(b, b + s) for (b, _), s in zip(widths, x.shape))

    def bw(g):
        return (g[sl],)

    return _result(np.pad(x.data, widths), (x,), bw, "pad")


# -- reductions -------------------------------------------------------------

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / max(n, 1))


# -- normalisation / attention primitives ---------------------------------

def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Max-subtracted softmax; entries where ``mask`` is False get probability 0."""
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericDomainError("softmax received non-finite input")
    if mask is not None:
        mask = np.broadcast_to(mask, xd.shape)
        if not np.all(mask.any(axis=axis)):
            raise ContractError("softmax mask leaves a slice with no admissible entry")
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=axis, keepdims=True)
    e = np.exp(xd - m)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if not np.all(np.isfinite(xd)):
        raise NumericDomainError("log_softmax received non-finite input")
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bw, "log_softmax")


def rms_norm(x: Tensor, weight: Tensor, eps: float = 1e-5) -> Tensor:
    """``x / rms(x) * weight`` over the last axis."""
    if weight.shape != x.shape[-1:]:
        raise ShapeError(f"rms_norm weight {weight.shape} does not match feature dim of {x.shape}")
    _check_same_dtype("rms_norm", x, weight)
    xd, wd = x.data, weight.data
    r = 1.0 / np.sqrt((xd * xd).mean(axis=-1, keepdims=True) + xd.dtype.type(eps))
    xn = xd * r

    def bw(g):
        gw = (g * xn).reshape(-1, wd.shape[0]).sum(axis=0)
        gy = g * wd
        gx = r * (gy - xn * (gy * xn).mean(axis=-1, keepdims=True))
        return gx, gw

    return _result(xn * wd, (x, weight), bw, "rms_norm")


# -- losses -----------------------------------------------------------------

def cross_entropy(logits: Tensor, targets, ignore_index: int = -100, weight=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``logits`` has shape ``[..., K]`` and ``targets`` the leading shape.  Rows
    whose target equals ``ignore_index`` are skipped.  With ``weight`` (one
    value per class) the mean is weighted: ``sum(w_t * nll) / sum(w_t)``.  An
    all-ignored batch yields 0 with a zero gradient.
    """
    k = logits.shape[-1]
    flat = logits.data.reshape(-1, k)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != flat.shape[0]:
        raise ShapeError(f"cross_entropy: {t.shape[0]} targets for {flat.shape[0]} logit rows")
    valid = t != ignore_index
    bad = valid & ((t < 0) | (t >= k))
    if np.any(bad):
        raise IndexError(f"cross_entropy target out of range [0, {k}): {t[bad][:5].tolist()}")
    if not np.all(np.isfinite(flat)):
        raise NumericDomainError("cross_entropy received non-finite logits")
    dtype = logits.dtype
    rows = np.nonzero(valid)[0]
    tv = t[rows]
    if weight is None:
        w = np.ones(rows.shape[0], dtype=np.float64)
    else:
        w = np.asarray(weight, dtype=np.float64)[tv]
    total_w = w.sum()
    shape = logits.shape
    if rows.size == 0 or total_w == 0:
        def bw_empty(g):
            return (np.zeros(shape, dtype=dtype),)

        return _result(np.zeros((), dtype=dtype), (logits,), bw_empty, "cross_entropy")
    sub_logits = flat[rows]
    z = sub_logits - sub_logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    denom = e.sum(axis=1, keepdims=True)
    logp = z[np.arange(rows.size), tv] - np.log(denom[:, 0])
    loss = np.asarray(-(w * logp).sum() / total_w, dtype=dtype)

    def bw(g):
        p = e / denom
        p[np.arange(rows.size), tv] -= 1
        coef = (w / total_w).astype(dtype)[:, None]
        full = np.zeros_like(flat)
        full[rows] = p * coef * g
        return (full.reshape(shape),)

    return _result(loss, (logits,), bw, "cross_entropy")


def mse(pred: Tensor, target) -> Tensor:
    """Mean of squared elementwise differences."""
    target = _as_tensor(target, pred)
    if pred.shape != target.shape:
        raise ShapeError(f"mse shape mismatch: {pred.shape} vs {target.shape}")
    _check_same_dtype("mse", pred, target)
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def bw(g):
        gp = diff * (g * pred.dtype.type(2.0 / n))
        return gp, -gp

    return _result(np.asarray((diff * diff).mean(), dtype=pred.dtype), (pred, target), bw, "mse")


def parameters_reached(root: Tensor) -> list[Tensor]:
    """Leaf tensors with ``requires_grad`` reachable from ``root`` (lineage audit)."""
    return [t for t in _topological_order(root) if t.is_leaf and t.requires_grad]


def stack_grads(params: Iterable[Tensor]) -> float:
    """Global L2 norm of the gradients of ``params`` (missing grads count as 0)."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
