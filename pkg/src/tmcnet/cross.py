"""Bidirectional cross-attention fusion and the stage-wise alignment loss.

At a fusion stage the visual tokens first attend to the language tokens,
then the language tokens attend to the *updated* visual tokens::

    F_V = MLP(MHCA(V, L, L))
    F_L = MLP(MHCA(L, F_V, F_V))

MLP is a pre-norm residual feed-forward applied on top of a residual
attention update.  The alignment term compares pooled pre-fusion visual
features with the stage's CLS token through a temperature-scaled cosine.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import FeedForward, LayerNorm, Linear, Module, MultiHeadAttention
from .tensor import Tensor

ALIGN_MODES = ("paper-literal", "attract")
COS_EPS = 1e-8


def mhca(q: Tensor, k: Tensor, v: Tensor, params: MultiHeadAttention, key_mask=None):
    """Multi-head cross-attention; returns ``(output, weights)``."""
    return params(q, k, v, key_mask)


@dataclass
class FusedPair:
    F_V: Tensor
    F_L: Tensor
    attn_VL: Tensor  # head-averaged (B, N, T); rows sum to 1
    attn_LV: Tensor | None = None


class MCMStage(Module):
    """One fusion stage.

    ``in_proj`` maps stage channels C_i to the common width d; ``out_proj``
    maps fused tokens back to C_i for the encoder continuation.
    """

    def __init__(self, channels: int, d: int, heads: int, rng, dtype=np.float64):
        self.in_proj = Linear(channels, d, rng, dtype)
        self.norm_v1 = LayerNorm(d, dtype)
        self.attn_v = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_v2 = LayerNorm(d, dtype)
        self.ffn_v = FeedForward(d, rng, dtype)
        self.norm_l1 = LayerNorm(d, dtype)
        self.attn_l = MultiHeadAttention(d, heads, rng, dtype)
        self.norm_l2 = LayerNorm(d, dtype)
        self.ffn_l = FeedForward(d, rng, dtype)
        self.out_proj = Linear(d, channels, rng, dtype)

    def project(self, V: Tensor) -> Tensor:
        return self.in_proj(V)

    def __call__(self, V_d: Tensor, L_i: Tensor, text_mask=None) -> FusedPair:
        return mcm_stage(V_d, L_i, self, text_mask)


def mcm_stage(V_d: Tensor, L_i: Tensor, p: MCMStage, text_mask=None) -> FusedPair:
    """Fuse visual tokens ``V_d`` (already at width d) with language tokens ``L_i``."""
    a, w_vl = p.attn_v(p.norm_v1(V_d), L_i, L_i, text_mask)
    x = T.add(V_d, a)
    F_V = T.add(x, p.ffn_v(p.norm_v2(x)))

    b, w_lv = p.attn_l(p.norm_l1(L_i), F_V, F_V)
    y = T.add(L_i, b)
    F_L = T.add(y, p.ffn_l(p.norm_l2(y)))
    return FusedPair(F_V=F_V, F_L=F_L, attn_VL=T.mean(w_vl, axis=-3), attn_LV=T.mean(w_lv, axis=-3))


class AlignmentHead(Module):
    def __init__(self, channels: int, d: int, D: int, rng, dtype=np.float64):
        self.proj_v = Linear(channels, D, rng, dtype)
        self.proj_l = Linear(d, D, rng, dtype)
        self.log_tau = Tensor(np.zeros((1,), dtype=dtype), requires_grad=True)

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data[0]))


@dataclass
class AlignTerm:
    loss: Tensor
    s: Tensor  # temperature-scaled similarity, one per sample
    degenerate: bool = False
    notes: list[str] = field(default_factory=list)


def align_logit(V_i: Tensor, cls_i: Tensor, head: AlignmentHead) -> tuple[Tensor, bool]:
    """``s = cos(GAP(V_i P_V), CLS_i P_L) / tau``, one value per sample."""
    zv = T.global_avg_pool(head.proj_v(V_i))
    zl = head.proj_l(cls_i)
    tiny = bool(np.any(np.linalg.norm(zv.data, axis=-1) < COS_EPS)
                or np.any(np.linalg.norm(zl.data, axis=-1) < COS_EPS))
    cos = T.cosine_similarity(zv, zl, eps=COS_EPS)
    s = T.mul(cos, T.exp(T.neg(head.log_tau)))
    return s, tiny


def logistic_align_loss(s: Tensor, mode: str = "paper-literal") -> Tensor:
    """Per-sample loss from the scaled similarity ``s``.

    paper-literal: -log sig(s) - log(1 - sig(s)); attract: -log sig(s).
    Uses -log sig(s) = softplus(-s) and -log(1 - sig(s)) = softplus(s).
    """
    if mode == "paper-literal":
        return T.add(T.softplus(T.neg(s)), T.softplus(s))
    if mode == "attract":
        return T.softplus(T.neg(s))
    raise ConfigError(f"unknown alignment mode {mode!r}; expected one of {ALIGN_MODES}")


def ma_loss_stage(V_i: Tensor, cls_i: Tensor, head: AlignmentHead, mode: str = "paper-literal") -> AlignTerm:
    """Alignment loss for one stage, averaged over the batch.

    ``V_i`` must be the pre-fusion tokens of that stage.
    """
    s, tiny = align_logit(V_i, cls_i, head)
    per_sample = logistic_align_loss(s, mode)
    notes = ["zero-norm embedding guarded by eps"] if tiny else []
    return AlignTerm(loss=T.mean(per_sample), s=s, degenerate=tiny, notes=notes)


def ma_loss_total(stage_losses: list[Tensor]) -> Tensor:
    if not stage_losses:
        raise ConfigError("alignment enabled but no fusion stages selected")
    total = stage_losses[0]
    for term in stage_losses[1:]:
        total = T.add(total, term)
    return T.scale(total, 1.0 / len(stage_losses))
