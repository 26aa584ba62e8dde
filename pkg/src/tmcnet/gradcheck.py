"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class DeterminismError(RuntimeError):
    """Two forward passes on identical inputs disagreed."""


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_coordinate: tuple[int, tuple[int, ...]] | None
    n_checked: int

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def _scalar(f, inputs) -> float:
    out = f(*inputs)
    if out.data.size != 1:
        raise ValueError(f"grad_check: f must return a scalar, got shape {out.shape}")
    return float(out.data.reshape(-1)[0])


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare autodiff gradients of scalar ``f(*inputs)`` with central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  With
    ``max_coords`` set, that many coordinates per input are sampled (all of them
    otherwise).  Inputs must be float64 leaves; their data is perturbed in place
    and restored.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-7, 1e-3]")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None

    out = f(*inputs)
    base = float(out.data.reshape(-1)[0])
    if _scalar(f, inputs) != base:
        raise DeterminismError("f returned different values on identical inputs")
    out.backward()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    worst_at = None
    n = 0
    for k, t in enumerate(inputs):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idxs = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idxs = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for j in idxs:
            orig = flat[j]
            flat[j] = orig + eps
            fp = _scalar(f, inputs)
            flat[j] = orig - eps
            fm = _scalar(f, inputs)
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            a = float(analytic.reshape(-1)[j])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            n += 1
            if worst_at is None or err > worst:
                worst = err
                worst_at = (k, tuple(int(i) for i in np.unravel_index(j, t.shape)))
    return GradCheckReport(max_rel_err=worst, worst_coordinate=worst_at, n_checked=n)


# ------------------------------------------------------------- op registry
#
# Each builder returns ``(f, inputs)``.  Outputs are contracted with a fixed
# random weight so every input coordinate gets an O(1) gradient, and inputs
# of kinked ops are kept away from their kinks.

def _leaf(rng, *shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, shape), requires_grad=True)


def _away(rng, *shape, kinks=(0.0,), gap=0.05) -> Tensor:
    """Uniform(-1, 1) samples pushed at least ``gap`` away from each kink."""
    x = rng.uniform(-1.0, 1.0, shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap)
    return Tensor(x, requires_grad=True)


def _contract(rng, shape):
    w = Tensor(rng.standard_normal(shape))
    return lambda out: T.tsum(T.mul(out, w))


def _unary(op, make):
    def build(rng):
        x = make(rng)
        c = _contract(rng, op(Tensor(x.data)).shape)
        return (lambda x: c(op(x))), [x]
    return build


def _binary(op, make_a, make_b):
    def build(rng):
        a, b = make_a(rng), make_b(rng)
        c = _contract(rng, op(Tensor(a.data), Tensor(b.data)).shape)
        return (lambda a, b: c(op(a, b))), [a, b]
    return build


def _conv_case(stride, pad, k):
    def build(rng):
        x, w, b = _leaf(rng, 2, 8, 8), _leaf(rng, 3, 2, k, k), _leaf(rng, 3)
        c = _contract(rng, T.conv2d(Tensor(x.data), Tensor(w.data), Tensor(b.data), stride, pad).shape)
        return (lambda x, w, b: c(T.conv2d(x, w, b, stride, pad))), [x, w, b]
    return build


def _masked_softmax(rng):
    x = _leaf(rng, 2, 3, 5)
    keep = np.ones((2, 3, 5), dtype=bool)
    keep[:, :, 3:] = False
    c = _contract(rng, (2, 3, 5))
    return (lambda x: c(T.softmax(T.masked_fill(x, keep, -np.inf)))), [x]


def _layer_norm(axis):
    def build(rng):
        x = _leaf(rng, 2, 4, 3, 3)
        n = x.shape[axis]
        g, b = _leaf(rng, n, lo=0.5, hi=1.5), _leaf(rng, n)
        if axis != -1:
            g.data, b.data = g.data.reshape(n, 1, 1), b.data.reshape(n, 1, 1)
        c = _contract(rng, x.shape)
        return (lambda x, g, b: c(T.layer_norm(x, g, b, axis=axis))), [x, g, b]
    return build


def _embedding(rng):
    table = _leaf(rng, 6, 4)
    ids = np.array([[1, 2, 2, 0], [5, 1, 3, 3]])
    c = _contract(rng, (2, 4, 4))
    return (lambda t: c(T.embedding(t, ids))), [table]


def _bce_graph(rng):
    # composed conv -> softmax -> BCE graph
    x, w = _leaf(rng, 1, 6, 6), _leaf(rng, 2, 1, 3, 3)
    y = Tensor((rng.random((2, 4, 4)) > 0.5).astype(np.float64))

    def f(x, w):
        z = T.conv2d(x, w)
        p = T.softmax(T.transpose(z, (1, 2, 0)))
        p = T.transpose(p, (2, 0, 1))
        ll = T.add(T.mul(y, T.log(p)), T.mul(T.add(T.neg(y), 1.0), T.log(T.add(T.neg(p), 1.0))))
        return T.neg(T.mean(ll))
    return f, [x, w]


def _concat_slice(rng):
    a, b, c = _leaf(rng, 2, 3, 3), _leaf(rng, 1, 3, 3), _leaf(rng, 3, 3, 3)
    k = _contract(rng, (6, 3, 3))
    return (lambda a, b, c: k(T.concat_channels([a, b, c]))), [a, b, c]


def _linear(rng):
    x, w, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2), _leaf(rng, 2)
    c = _contract(rng, (2, 3, 2))
    return (lambda x, w, b: c(T.linear(x, w, b))), [x, w, b]


def _mha(rng):
    from .nn import MultiHeadAttention
    mha = MultiHeadAttention(4, 2, rng, np.float64)
    q, kv = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 5, 4)
    params = [p for _, p in mha.named_parameters()]
    c = _contract(rng, (2, 3, 4))

    def f(q, kv, *ps):
        return c(mha(q, kv, kv)[0])
    return f, [q, kv] + params


OP_CASES: dict[str, Callable] = {
    "add": _binary(T.add, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 3, 4)),
    "add_broadcast": _binary(T.add, lambda r: _leaf(r, 2, 3, 4), lambda r: _leaf(r, 3, 4)),
    "sub": _binary(T.sub, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 3, 4)),
    "mul": _binary(T.mul, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 3, 4)),
    "mul_scalar": _binary(T.mul, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 1)),
    "div": _binary(T.div, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 3, 4, lo=0.5, hi=2.0)),
    "neg": _unary(T.neg, lambda r: _leaf(r, 3, 4)),
    "scale": _unary(lambda x: T.scale(x, 2.5), lambda r: _leaf(r, 3, 4)),
    "sigmoid": _unary(T.sigmoid, lambda r: _leaf(r, 3, 4, lo=-4, hi=4)),
    "log": _unary(T.log, lambda r: _leaf(r, 3, 4, lo=0.2, hi=3.0)),
    "exp": _unary(T.exp, lambda r: _leaf(r, 3, 4)),
    "sqrt": _unary(T.sqrt, lambda r: _leaf(r, 3, 4, lo=0.2, hi=3.0)),
    "relu": _unary(T.relu, lambda r: _away(r, 3, 4)),
    "gelu": _unary(T.gelu, lambda r: _leaf(r, 3, 4, lo=-3, hi=3)),
    "softplus": _unary(T.softplus, lambda r: _leaf(r, 3, 4, lo=-5, hi=5)),
    "clamp": _unary(lambda x: T.clamp(x, -0.5, 0.5), lambda r: _away(r, 3, 4, kinks=(-0.5, 0.5))),
    "sum": _unary(lambda x: T.tsum(x, axis=1), lambda r: _leaf(r, 3, 4)),
    "mean": _unary(lambda x: T.mean(x, axis=0, keepdims=True), lambda r: _leaf(r, 3, 4)),
    "global_avg_pool": _unary(T.global_avg_pool, lambda r: _leaf(r, 2, 5, 3)),
    "reshape": _unary(lambda x: T.reshape(x, (4, 3)), lambda r: _leaf(r, 3, 4)),
    "transpose": _unary(lambda x: T.transpose(x, (2, 0, 1)), lambda r: _leaf(r, 2, 3, 4)),
    "getitem": _unary(lambda x: T.getitem(x, (slice(None), slice(1, 3))), lambda r: _leaf(r, 3, 4)),
    "concat": _binary(lambda a, b: T.concat([a, b], axis=-1), lambda r: _leaf(r, 2, 3), lambda r: _leaf(r, 2, 4)),
    "concat_channels": _concat_slice,
    "upsample2x": _unary(T.upsample2x, lambda r: _leaf(r, 2, 3, 3)),
    "upsample_nearest": _unary(lambda x: T.upsample_nearest(x, 3), lambda r: _leaf(r, 1, 2, 2, 2)),
    "matmul": _binary(T.matmul, lambda r: _leaf(r, 3, 4), lambda r: _leaf(r, 4, 2)),
    "matmul_batched": _binary(T.matmul, lambda r: _leaf(r, 2, 3, 4), lambda r: _leaf(r, 2, 4, 2)),
    "linear": _linear,
    "softmax_rows": _unary(T.softmax_rows, lambda r: _leaf(r, 3, 5, lo=-3, hi=3)),
    "masked_softmax": _masked_softmax,
    "layer_norm": _layer_norm(-1),
    "layer_norm_channels": _layer_norm(-3),
    "embedding": _embedding,
    "conv2d": _conv_case(1, 1, 3),
    "conv2d_stride2": _conv_case(2, 1, 4),
    "conv2d_1x1": _conv_case(1, 0, 1),
    "cosine_similarity": _binary(T.cosine_similarity, lambda r: _leaf(r, 2, 5), lambda r: _leaf(r, 2, 5)),
    "multi_head_attention": _mha,
    "conv_softmax_bce": _bce_graph,
}


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: GradCheckReport
    tol: float

    @property
    def passed(self) -> bool:
        return self.report.passed(self.tol)


def run_op_suite(seeds=range(10), tol: float = 1e-4, eps: float = 1e-6, names=None) -> list[SuiteResult]:
    out = []
    for name in names or OP_CASES:
        for seed in seeds:
            f, inputs = OP_CASES[name](np.random.default_rng(seed))
            out.append(SuiteResult(name, seed, grad_check(f, inputs, eps=eps), tol))
    return out


QK_SHARPEN = 3.0


def tiny_model_config():
    from .segnet import ModelConfig
    return ModelConfig(image_size=16, patch=2, base_channels=4, d=8, d_l=8, heads=2, text_blocks=1)


def end_to_end_case(seed: int, batch: int = 2, lam: float = 0.1):
    """Tiny full model in float64: joint loss as a function of all parameters."""
    from .metrics import bce_loss, total_loss
    from .segnet import TMCNet
    from .text import Vocabulary, batch_tokens, tokenize

    rng = np.random.default_rng(seed)
    cfg = tiny_model_config()
    model = TMCNet(cfg, seed=seed, dtype=np.float64)
    # move norms and position tables off their init values, and sharpen
    # query/key maps so attention is far from uniform: this exercises every
    # path with gradients well above finite-difference roundoff
    for name, p in model.named_parameters():
        if p.data.ndim == 1 and not name.endswith("log_tau") or name.endswith("pos"):
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
        elif name.endswith(("w_q.weight", "w_k.weight")):
            p.data = p.data * QK_SHARPEN
    image = rng.random((batch, 1, cfg.image_size, cfg.image_size))
    mask = (rng.random((batch, 1, cfg.image_size, cfg.image_size)) > 0.5).astype(np.float64)
    vocab = Vocabulary.default()
    prompts = ["one target region, upper left", "two target regions, upper right and lower left"]
    ids, tmask = batch_tokens([tokenize(prompts[k % 2], vocab) for k in range(batch)])
    params = [p for _, p in model.named_parameters()]

    def f(*_):
        out = model.forward(image, ids, tmask)
        return total_loss(bce_loss(out.prob, mask), out.align_loss, lam).total
    return f, params, model


def run_end_to_end(seeds=range(10), tol: float = 1e-3, eps: float = 1e-5,
                   tensor_frac: float = 0.5) -> list[SuiteResult]:
    """One sampled coordinate in each of a random ``tensor_frac`` share of the
    parameter tensors per seed.

    ``eps`` trades relu-kink error (a bias shift moves many pre-activations
    at once) against roundoff on small gradients.
    """
    out = []
    for seed in seeds:
        f, params, _ = end_to_end_case(seed)
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(params), size=max(1, int(tensor_frac * len(params))), replace=False))
        chosen = [params[k] for k in pick]
        rep = grad_check(f, chosen, eps=eps, max_coords=1, rng=rng)
        out.append(SuiteResult("end_to_end", seed, rep, tol))
    return out
