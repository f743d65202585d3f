"""Dense float64 tensors with reverse-mode gradients.

Storage is a C-contiguous (row-major) numpy array; every differentiable op
records its parents and a closure mapping the upstream gradient to one
gradient per parent. ``Tensor.backward`` replays the recorded ops in exact
reverse execution order.

The module also carries the finite-difference oracle (:func:`grad_check`)
and the LTNS tensor file format.
"""

from __future__ import annotations

import contextlib
import io
import itertools
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, FormatError

COSINE_EPS = 1e-8

_seq = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy; arr must already be float64 and owned by the caller
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        t.data = arr if arr.flags.c_contiguous else arr.copy(order="C")
        t.grad = None
        t.requires_grad = False
        t._parents = ()
        t._backward = None
        t._seq = next(_seq)
        t.name = None
        return t

    # -- basic properties ----------------------------------------------------
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

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self, grad=None) -> None:
        Graph.trace(self).backward(self, grad)

    # -- operator sugar --------------------------------------------------------
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

    def __getitem__(self, key):
        return index(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


class Graph:
    """Ordered record of the differentiable ops reachable from one output.

    ``nodes`` holds the non-leaf tensors in execution order; ``leaves`` the
    gradient-requiring inputs.
    """

    def __init__(self, nodes: list[Tensor], leaves: list[Tensor]):
        self.nodes = nodes
        self.leaves = leaves

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        leaves: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if id(t) in seen or not t.requires_grad:
                continue
            seen.add(id(t))
            if t._backward is None:
                leaves.append(t)
            else:
                nodes.append(t)
                stack.extend(t._parents)
        nodes.sort(key=lambda t: t._seq)
        return cls(nodes, leaves)

    def backward(self, root: Tensor, grad=None) -> None:
        if grad is None:
            if root.size != 1:
                raise ContractError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(root.data)
        else:
            grad = np.broadcast_to(np.asarray(grad, dtype=np.float64), root.shape)
        for leaf in self.leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
        if not root.requires_grad:
            return
        if root._backward is None:
            root.grad = root.grad + grad
            return
        pending: dict[int, np.ndarray] = {id(root): np.array(grad, dtype=np.float64)}
        for t in reversed(self.nodes):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            for parent, pg in zip(t._parents, t._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._backward is None:
                    parent.grad = parent.grad + pg
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise DomainError(f"{op}: result is not finite")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def back(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _node(ad * bd, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd
    _check_finite(out, "div")

    def back(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _node(out, (a, b), back)


def neg(x) -> Tensor:
    x = as_tensor(x)
    return _node(-x.data, (x,), lambda g: (-g,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    _check_finite(out, "exp")
    return _node(out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: argument must be positive")
    xd = x.data
    return _node(np.log(xd), (x,), lambda g: (g / xd,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0.0
    # np.maximum keeps NaN visible so a diverged run is caught downstream
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * on,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))
    return _node(out, (x,), lambda g: (g * out * (1.0 - out),))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _node(xd * xd, (x,), lambda g: (2.0 * g * xd,))


def sqrt(x) -> Tensor:
    """Square root; the gradient at exactly zero is taken as zero."""
    x = as_tensor(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: negative argument")
    out = np.sqrt(x.data)
    safe = np.where(out > 0.0, out, 1.0)
    return _node(out, (x,), lambda g: (np.where(out > 0.0, g / (2.0 * safe), 0.0),))


def elementwise(op: str, *operands) -> Tensor:
    """Dispatch by name: add, sub, mul, div, exp, log, relu, sigmoid."""
    table = {
        "add": add, "sub": sub, "mul": mul, "div": div,
        "exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid,
        "neg": neg, "square": square, "sqrt": sqrt,
    }
    try:
        fn = table[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*operands)


# -- linear algebra and shape ops ------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes like ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims differ: {a.shape} x {b.shape}") from exc

    def back(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, (a, b), back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return _node(out, (x,), lambda g: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(x.data.transpose(axes).copy(order="C"), (x,), lambda g: (g.transpose(inv),))


def index(x, key) -> Tensor:
    x = as_tensor(x)
    src = x.shape

    def back(g):
        full = np.zeros(src)
        np.add.at(full, key, g)
        return (full,)

    return _node(np.array(x.data[key]), (x,), back)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def neighborhood_mean(x, radius: int) -> Tensor:
    """Average over the (2r+1)^2 window around each pixel, edges clamped.

    ``x`` has layout ``[..., H, W, F]``.
    """
    x = as_tensor(x)
    if radius == 0:
        return _node(x.data.copy(), (x,), lambda g: (g,))
    r = radius
    H, W = x.shape[-3], x.shape[-2]
    lead = x.ndim - 3
    pad = [(0, 0)] * lead + [(r, r), (r, r), (0, 0)]
    padded = np.pad(x.data, pad, mode="edge")
    k = 2 * r + 1
    acc = np.zeros_like(x.data)
    for dy in range(k):
        for dx in range(k):
            acc += padded[..., dy:dy + H, dx:dx + W, :]
    out = acc / (k * k)

    def back(g):
        gp = np.zeros(padded.shape)
        for dy in range(k):
            for dx in range(k):
                gp[..., dy:dy + H, dx:dx + W, :] += g
        gp /= k * k
        # fold the clamped border back onto the edge rows/cols
        gp[..., r, :, :] += gp[..., :r, :, :].sum(axis=-3)
        gp[..., r + H - 1, :, :] += gp[..., r + H:, :, :].sum(axis=-3)
        gp[..., :, r, :] += gp[..., :, :r, :].sum(axis=-2)
        gp[..., :, r + W - 1, :] += gp[..., :, r + W:, :].sum(axis=-2)
        return (gp[..., r:r + H, r:r + W, :],)

    return _node(out, (x,), back)


# -- reductions ----------------------------------------------------------------

def _axes(x: Tensor, axis) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(x.ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    norm = []
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ContractError(f"axis {ax} out of range for shape {x.shape}")
        norm.append(ax % x.ndim)
        if x.shape[ax] == 0:
            raise DomainError(f"reduction over empty axis {ax}")
    return tuple(norm)


def _expand(g: np.ndarray, axes: tuple[int, ...], keepdims: bool, shape) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x, axis)
    shape = x.shape
    return _node(x.data.sum(axis=axes, keepdims=keepdims), (x,),
                 lambda g: (_expand(g, axes, keepdims, shape),))


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _axes(x, axis)
    n = int(np.prod([x.shape[a] for a in axes]))
    shape = x.shape
    return _node(x.data.mean(axis=axes, keepdims=keepdims), (x,),
                 lambda g: (_expand(g, axes, keepdims, shape) / n,))


def tmax(x, axis: int = -1, keepdims: bool = False, mask=None) -> Tensor:
    """Max along one axis; ``mask`` (broadcastable bool) marks eligible entries.

    The gradient goes to the first maximal eligible entry.
    """
    x = as_tensor(x)
    (ax,) = _axes(x, axis)
    xd = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not mask.any(axis=ax).all():
            raise DomainError("max: every entry along the axis is masked out")
        xd = np.where(mask, xd, -np.inf)
    arg = np.expand_dims(np.argmax(xd, axis=ax), ax)
    out = np.take_along_axis(xd, arg, axis=ax)
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        gk = g if keepdims else np.expand_dims(g, ax)
        np.put_along_axis(full, arg, gk, axis=ax)
        return (full,)

    return _node(out if keepdims else np.squeeze(out, ax), (x,), back)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (ax,) = _axes(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=ax, keepdims=True)
    return _node(out, (x,), lambda g: (out * (g - (g * out).sum(axis=ax, keepdims=True)),))


def logsumexp(x, axis: int = -1, keepdims: bool = False, mask=None) -> Tensor:
    """log sum exp along ``axis`` restricted to entries where ``mask`` is true."""
    x = as_tensor(x)
    (ax,) = _axes(x, axis)
    xd = x.data
    if mask is None:
        m = np.ones(xd.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), xd.shape)
        if not m.any(axis=ax).all():
            raise DomainError("logsumexp: every entry along the axis is masked out")
    top = np.where(m, xd, -np.inf).max(axis=ax, keepdims=True)
    e = np.where(m, np.exp(np.where(m, xd - top, 0.0)), 0.0)
    s = e.sum(axis=ax, keepdims=True)
    out = top + np.log(s)
    p = e / s

    def back(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (gk * p,)

    return _node(out if keepdims else np.squeeze(out, ax), (x,), back)


def reductions(op: str, x, axis=None) -> Tensor:
    """Dispatch by name: sum, mean, max, softmax."""
    if op == "sum":
        return tsum(x, axis)
    if op == "mean":
        return mean(x, axis)
    if op == "max":
        return tmax(x, -1 if axis is None else axis)
    if op == "softmax":
        return softmax(x, -1 if axis is None else axis)
    raise ContractError(f"unknown reduction {op!r}")


# -- norms and cosine ------------------------------------------------------------

def clamped_norm(x, axis: int = -1, eps: float = COSINE_EPS, keepdims: bool = True) -> Tensor:
    """max(||x||_2, eps) along ``axis``."""
    x = as_tensor(x)
    (ax,) = _axes(x, axis)
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=ax, keepdims=True))
    live = n > eps
    out = np.where(live, n, eps)
    safe = np.where(live, n, 1.0)

    def back(g):
        gk = g if keepdims else np.expand_dims(g, ax)
        return (np.where(live, gk * xd / safe, 0.0),)

    return _node(out if keepdims else np.squeeze(out, ax), (x,), back)


def l2_normalize(x, axis: int = -1, eps: float = COSINE_EPS) -> Tensor:
    return div(x, clamped_norm(x, axis, eps))


def cosine_sim(u, v, eps: float = COSINE_EPS) -> Tensor:
    """u.v / (max(|u|, eps) * max(|v|, eps)) for two vectors of equal length."""
    u, v = as_tensor(u), as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape or u.shape[0] < 1:
        raise DimensionError(f"cosine_sim needs two equal-length vectors, got {u.shape}, {v.shape}")
    dot = tsum(mul(u, v))
    return div(dot, mul(clamped_norm(u, 0, eps, keepdims=False), clamped_norm(v, 0, eps, keepdims=False)))


# -- finite-difference oracle ----------------------------------------------------

def grad_check(f: Callable[..., Tensor], x, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst per-coordinate relative error between analytic and central-difference gradients.

    ``x`` is a tensor or a sequence of tensors passed positionally to ``f``.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    inputs = [x] if isinstance(x, Tensor) else list(x)
    leaves = [Tensor(t.data, requires_grad=True) for t in inputs]
    out = f(*leaves)
    if out.size != 1:
        raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
    out.backward()
    worst = 0.0
    with no_grad():
        for leaf in leaves:
            analytic = leaf.grad.reshape(-1)
            flat = leaf.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(*leaves).item()
                flat[i] = orig - h
                fm = f(*leaves).item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * h)
                a = analytic[i]
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
    return worst


# -- LTNS file format ------------------------------------------------------------

LTNS_MAGIC = b"LTNS"


def ltns_dumps(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    buf = io.BytesIO()
    buf.write(LTNS_MAGIC)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def ltns_read_from(stream) -> Tensor:
    """Read one LTNS record from a binary stream."""
    magic = stream.read(4)
    if magic != LTNS_MAGIC:
        raise FormatError(f"bad LTNS magic {magic!r}")
    head = stream.read(4)
    if len(head) != 4:
        raise FormatError("truncated LTNS header")
    (rank,) = struct.unpack("<I", head)
    if rank > 32:
        raise FormatError(f"implausible LTNS rank {rank}")
    raw = stream.read(4 * rank)
    if len(raw) != 4 * rank:
        raise FormatError("truncated LTNS extents")
    shape = struct.unpack(f"<{rank}I", raw)
    n = int(np.prod(shape, dtype=np.int64))
    payload = stream.read(8 * n)
    if len(payload) != 8 * n:
        raise FormatError(f"truncated LTNS payload: expected {8 * n} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return Tensor._wrap(arr)


def ltns_loads(blob: bytes) -> Tensor:
    stream = io.BytesIO(blob)
    t = ltns_read_from(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after LTNS payload")
    return t


def save_ltns(path, t) -> None:
    with open(path, "wb") as fh:
        fh.write(ltns_dumps(t))


def load_ltns(path) -> Tensor:
    with open(path, "rb") as fh:
        return ltns_loads(fh.read())


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
