"""Parameter containers and the layers shared by the text, visual and fusion parts."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .tensor import Tensor


class Module:
    """Attribute-based parameter registry.

    Parameters are leaf tensors with ``requires_grad=True`` stored as
    attributes, or inside sub-modules, lists or dicts of sub-modules.  Names
    follow attribute insertion order, so they are stable across runs.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for k, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")
            elif isinstance(value, dict):
                for k, item in value.items():
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{k}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def uniform_param(rng: np.random.Generator, shape, fan_in: int, dtype) -> Tensor:
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def const_param(shape, value: float, dtype) -> Tensor:
    return Tensor(np.full(shape, value, dtype=dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, dtype=np.float64, bias: bool = True):
        self.weight = uniform_param(rng, (d_in, d_out), d_in, dtype)
        self.bias = const_param((d_out,), 0.0, dtype) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, dtype=np.float64, eps: float = 1e-5):
        self.gamma = const_param((dim,), 1.0, dtype)
        self.beta = const_param((dim,), 0.0, dtype)
        self.eps = eps

    def __call__(self, x: Tensor, axis: int = -1) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, self.eps, axis=axis)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng, dtype=np.float64,
                 stride: int = 1, pad: int = 0, bias: bool = True):
        self.weight = uniform_param(rng, (c_out, c_in, k, k), c_in * k * k, dtype)
        self.bias = const_param((c_out,), 0.0, dtype) if bias else None
        self.stride = stride
        self.pad = pad

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvNormAct(Module):
    """conv -> channel layer norm -> relu."""

    def __init__(self, c_in, c_out, k, rng, dtype=np.float64, stride=1, pad=0):
        self.conv = Conv2d(c_in, c_out, k, rng, dtype, stride=stride, pad=pad)
        self.norm = LayerNorm(c_out, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.norm(self.conv(x), axis=-3))


class FeedForward(Module):
    def __init__(self, dim: int, rng, dtype=np.float64, hidden: int | None = None):
        hidden = hidden or 4 * dim
        self.fc1 = Linear(dim, hidden, rng, dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``h`` heads.

    Queries have width ``dim``; keys/values may come from another modality of
    width ``kv_dim``.  Accepts ``(a, dim)`` or batched ``(B, a, dim)`` queries.
    """

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64, kv_dim: int | None = None):
        if heads < 1 or dim % heads:
            raise ConfigError(f"model width {dim} is not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.d_k = dim // heads
        self.w_q = Linear(dim, dim, rng, dtype)
        # no key bias: it shifts every score in a row equally, so softmax
        # cancels it and its gradient is identically zero
        self.w_k = Linear(kv_dim, dim, rng, dtype, bias=False)
        self.w_v = Linear(kv_dim, dim, rng, dtype)
        self.w_o = Linear(dim, dim, rng, dtype)

    def __call__(self, q: Tensor, k: Tensor, v: Tensor, key_mask=None) -> tuple[Tensor, Tensor]:
        """Returns ``(output, weights)`` with weights of shape (B, h, a, b)."""
        unbatched = q.ndim == 2
        if unbatched:
            q, k, v = (T.reshape(t, (1,) + t.shape) for t in (q, k, v))
            if key_mask is not None:
                key_mask = np.asarray(key_mask)[None]
        B, a, _ = q.shape
        b = k.shape[1]
        if v.shape[1] != b:
            raise T.ShapeError(f"keys {k.shape} and values {v.shape} differ in length")
        h, dk = self.heads, self.d_k
        qh = T.transpose(T.reshape(self.w_q(q), (B, a, h, dk)), (0, 2, 1, 3))
        kh = T.transpose(T.reshape(self.w_k(k), (B, b, h, dk)), (0, 2, 3, 1))
        vh = T.transpose(T.reshape(self.w_v(v), (B, b, h, dk)), (0, 2, 1, 3))
        logits = T.scale(T.matmul(qh, kh), 1.0 / math.sqrt(dk))
        if key_mask is not None:
            keep = np.asarray(key_mask, dtype=bool).reshape(B, 1, 1, b)
            logits = T.masked_fill(logits, keep, -np.inf)
        weights = T.softmax_rows(logits)
        ctx = T.reshape(T.transpose(T.matmul(weights, vh), (0, 2, 1, 3)), (B, a, h * dk))
        out = self.w_o(ctx)
        if unbatched:
            out = T.reshape(out, out.shape[1:])
            weights = T.reshape(weights, weights.shape[1:])
        return out, weights


class SelfAttentionBlock(Module):
    """Pre-norm transformer block: x + MHA(LN x); x + FFN(LN x)."""

    def __init__(self, dim: int, heads: int, rng, dtype=np.float64):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = FeedForward(dim, rng, dtype)

    def __call__(self, x: Tensor, key_mask=None) -> tuple[Tensor, Tensor]:
        y = self.norm1(x)
        a, w = self.attn(y, y, y, key_mask)
        x = T.add(x, a)
        x = T.add(x, self.ffn(self.norm2(x)))
        return x, w
