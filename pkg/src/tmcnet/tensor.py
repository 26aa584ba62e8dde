"""Dense tensors with reverse-mode automatic differentiation.

Every op takes and returns :class:`Tensor` objects backed by numpy arrays.
When any input requires a gradient, the output records its parents and a
closure mapping the output gradient to parent gradients; :meth:`Tensor.backward`
walks that graph in reverse topological order.

Conventions:

* spatial tensors are ``(C, H, W)`` or batched ``(B, C, H, W)``, row-major;
* broadcasting is limited to a python/size-1 scalar, or an operand whose
  shape equals the trailing dims of the other (a shared weight applied
  across a leading batch axis);
* graph tensors are never mutated in place.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class DomainError(ValueError):
    """An input lies outside the domain of the op (e.g. log of x <= 0)."""


class GraphError(RuntimeError):
    """Misuse of the compute graph (non-scalar seed, double backward...)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_freed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._freed = False

    # ------------------------------------------------------------------ info
    @property
    def shape(self) -> tuple[int, ...]:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    # ------------------------------------------------------------- operators
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    # -------------------------------------------------------------- backward
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that
        requires a gradient.  Leaf gradients accumulate across graphs; a given
        graph may only be traversed once."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar seed, got shape {self.shape}")
        if self._freed:
            raise GraphError("backward already ran through this graph; rebuild it first")
        if not self.requires_grad:
            raise GraphError("tensor does not require grad")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if node._backward is None:
                if g is not None:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            if g is None:
                node._freed = True
                continue
            pgrads = node._backward(g)
            for parent, pg in zip(node._parents, pgrads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            node._backward = _freed_backward
            node._parents = ()
            node._freed = True
        self._freed = True


def _freed_backward(_g):
    raise GraphError("backward already ran through this graph; rebuild it first")


def _topo_order(root: Tensor) -> list[Tensor]:
    """Reverse topological order (root first), each node exactly once."""
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
    order.reverse()
    return order


# ---------------------------------------------------------------- helpers

def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._freed = False
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or int(np.prod(shape)) == 1:
        return g.sum().reshape(shape)
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead)))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    big, small = (a, b) if a.ndim >= b.ndim else (b, a)
    if big.shape[big.ndim - small.ndim:] == small.shape:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


# --------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), _reduce_to(g, sb)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g, sa), -_reduce_to(g, sb)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _reduce_to(g * bd, ad.shape), _reduce_to(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    a = as_tensor(a)
    b = as_tensor(b, like=a)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _reduce_to(g / bd, ad.shape), _reduce_to(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * c,), "scale")


# ----------------------------------------------------------- elementwise

def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(a: Tensor) -> Tensor:
    x = a.data
    bad = ~(x > 0)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DomainError(f"log of non-positive value {x[idx]!r} at index {idx}")
    return _make(np.log(x), (a,), lambda g: (g / x,), "log")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def sqrt(a: Tensor) -> Tensor:
    x = a.data
    if (x < 0).any():
        idx = tuple(int(i) for i in np.argwhere(x < 0)[0])
        raise DomainError(f"sqrt of negative value at index {idx}")
    out = np.sqrt(x)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _make(out, (a,), backward, "gelu")


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^x), stable for large |x|."""
    x = a.data
    out = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        s = np.empty_like(x)
        pos = x >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    return _make(out, (a,), backward, "softplus")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def elementwise(kind: str, *operands, **kw) -> Tensor:
    """Dispatch by name: sigmoid, log, relu, add, mul, scale."""
    table = {"sigmoid": sigmoid, "log": log, "relu": relu, "add": add,
             "mul": mul, "scale": scale, "exp": exp, "gelu": gelu,
             "softplus": softplus, "sqrt": sqrt}
    if kind not in table:
        raise KeyError(f"unknown elementwise op {kind!r}")
    return table[kind](*operands, **kw)


# ------------------------------------------------------------- reductions

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([shape[ax] for ax in axes]))
    if n == 0:
        raise ShapeError("mean over an empty axis")

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.mean(a.data, axis=axis, keepdims=keepdims), (a,), backward, "mean")


def global_avg_pool(x: Tensor) -> Tensor:
    """Column means of a token matrix: ``(..., N, D) -> (..., 1, D)``."""
    if x.ndim < 2:
        raise ShapeError(f"global_avg_pool expects (..., N, D), got {x.shape}")
    if x.shape[-2] == 0:
        raise ShapeError("global_avg_pool over zero tokens")
    return mean(x, axis=-2, keepdims=True)


# ----------------------------------------------------------------- shapes

def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def getitem(a: Tensor, idx) -> Tensor:
    # basic indexing only; fancy indices with repeats would drop gradient
    shape = a.shape
    dtype = a.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return _make(a.data[idx], (a,), backward, "getitem")


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat of no tensors")
    nd = parts[0].ndim
    ax = axis % nd
    ref = parts[0].shape
    for k, p in enumerate(parts):
        if p.ndim != nd or p.shape[:ax] + p.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError(
                f"concat: part {k} has shape {p.shape}, incompatible with {ref} off axis {axis}")
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[ax] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for k in range(len(parts)):
            sl = [slice(None)] * nd
            sl[ax] = slice(bounds[k], bounds[k + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return _make(np.concatenate([p.data for p in parts], axis=ax), parts, backward, "concat")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Stack ``(C_p, H, W)`` (or batched) maps along the channel axis."""
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels of no tensors")
    hw = parts[0].shape[-2:]
    for k, p in enumerate(parts):
        if p.ndim < 3 or p.shape[-2:] != hw or p.shape[:-3] != parts[0].shape[:-3]:
            raise ShapeError(
                f"concat_channels: part {k} has shape {p.shape}, expected spatial dims {hw}")
    return concat(parts, axis=-3)


def upsample2x(x: Tensor) -> Tensor:
    return upsample_nearest(x, 2)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour spatial upsampling over the last two axes."""
    if factor == 1:
        return x
    f = int(factor)
    out = x.data.repeat(f, axis=-2).repeat(f, axis=-1)
    H, W = x.shape[-2:]

    def backward(g):
        g = g.reshape(g.shape[:-2] + (H, f, W, f))
        return (g.sum(axis=(-3, -1)),)

    return _make(out, (x,), backward, "upsample")


# ----------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``(..., m, k) @ (..., k, n)``; ``b`` may be 2-D and shared over the batch."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # shared weight
        ad, bd = a.data, b.data

        def backward(g):
            ga = g @ bd.T
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return ga, gb

        return _make(ad @ bd, (a, b), backward, "matmul")
    if a.ndim != b.ndim:
        raise ShapeError(f"matmul: rank mismatch for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape (in, out) and ``b`` of shape (out,)."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    out = xd @ wd
    if b is not None:
        out = out + b.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward, "linear")


def softmax_rows(m: Tensor) -> Tensor:
    """Softmax along the last axis with row-max subtraction."""
    x = m.data
    mx = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - mx)
    out = e / np.sum(e, axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=-1, keepdims=True)),)

    return _make(out, (m,), backward, "softmax")


softmax = softmax_rows


def masked_fill(x: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by the constant ``value``.

    ``keep`` is a constant boolean array broadcastable to ``x``."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, x.data, x.dtype.type(value))
    shape = x.shape
    return _make(out, (x,), lambda g: (np.where(keep, g, 0).reshape(shape),), "masked_fill")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise over one axis, then scale/shift with per-feature parameters."""
    ax = axis % x.ndim
    xd = x.data
    mu = xd.mean(axis=ax, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    bshape = [1] * x.ndim
    bshape[ax] = x.shape[ax]
    gd = gamma.data.reshape(bshape)
    out = xh * gd + beta.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != ax)
    n = x.shape[ax]

    def backward(g):
        gg = (g * xh).sum(axis=red).reshape(gamma.shape)
        gb = g.sum(axis=red).reshape(beta.shape)
        gxh = g * gd
        gx = inv / n * (n * gxh - gxh.sum(axis=ax, keepdims=True)
                        - xh * (gxh * xh).sum(axis=ax, keepdims=True))
        return gx, gg, gb

    return _make(out, (x, gamma, beta), backward, "layer_norm")


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape = table.shape

    def backward(g):
        full = np.zeros(shape, dtype=table.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (full,)

    return _make(table.data[ids], (table,), backward, "embedding")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``(C_in, H, W)`` or ``(B, C_in, H, W)`` input with
    a ``(C_out, C_in, k, k)`` kernel bank."""
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d expects (C,H,W) or (B,C,H,W), got {x.shape}")
    B, C, H, W = xd.shape
    O, Ci, k, k2 = w.shape
    if Ci != C or k != k2:
        raise ShapeError(f"conv2d: kernel {w.shape} does not fit input {x.shape}")
    Hp, Wp = H + 2 * pad, W + 2 * pad
    if Hp < k or Wp < k:
        raise ShapeError(f"conv2d: kernel {k} larger than padded input {(Hp, Wp)}")
    if (Hp - k) % stride or (Wp - k) % stride:
        raise ShapeError(
            f"conv2d: output extent not integral for input {(H, W)}, k={k}, stride={stride}, pad={pad}")
    Ho, Wo = (Hp - k) // stride + 1, (Wp - k) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wm = w.data.reshape(O, -1)
    out = cols @ wm.T
    if b is not None:
        out = out + b.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    if unbatched:
        out = out[0]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g[None] if unbatched else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(w.shape)
        gb = g2.sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            dcol = (g2 @ wm).reshape(B, Ho, Wo, C, k, k)
            dxp = np.zeros((B, C, Hp, Wp), dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                        dcol[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad:pad + H, pad:pad + W]
            if unbatched:
                gx = gx[0]
        return gx, gw, gb

    parents = (x, w, b) if b is not None else (x, w)
    return _make(out, parents, backward, "conv2d")


def cosine_similarity(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine along the last axis: ``<a,b> / (|a||b| + eps)``."""
    dot = tsum(mul(a, b), axis=-1)
    na = sqrt(tsum(mul(a, a), axis=-1))
    nb = sqrt(tsum(mul(b, b), axis=-1))
    return div(dot, add(mul(na, nb), eps))


# ---------------------------------------------------------------- debug io

def dump_tensor(t, path) -> None:
    """Write ``shape: d0 d1 ...`` followed by whitespace-separated values."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("shape: " + " ".join(str(d) for d in arr.shape) + "\n")
        fh.write(" ".join(repr(float(v)) for v in arr.reshape(-1)) + "\n")


def load_tensor(path) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if not header or header[0] != "shape:":
            raise ValueError(f"{path}: missing 'shape:' header")
        shape = tuple(int(d) for d in header[1:])
        values = np.array(fh.read().split(), dtype=np.float64)
    return values.reshape(shape)
