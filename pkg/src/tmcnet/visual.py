"""Hierarchical four-stage visual encoder (a small Swin-style stand-in).

Each stage runs one global self-attention block over its token grid, then
2x2 patch merging halves the grid and doubles the channels.  Tokens are
``(B, N, C)`` with ``N = H*W`` in row-major grid order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LayerNorm, Linear, Module, SelfAttentionBlock
from .tensor import ShapeError, Tensor

N_STAGES = 4


@dataclass
class EncoderConfig:
    image_size: int = 32
    in_channels: int = 1
    patch: int = 4
    base_channels: int = 8
    fusion_stages: tuple[int, ...] = (2, 3, 4)
    heads: int = 2

    def __post_init__(self):
        self.fusion_stages = tuple(sorted(int(s) for s in self.fusion_stages))
        if not set(self.fusion_stages) <= {2, 3, 4}:
            raise ConfigError(f"fusion stages must be a subset of {{2,3,4}}, got {self.fusion_stages}")
        g = self.image_size // self.patch
        if self.image_size % self.patch or g % 2 ** (N_STAGES - 1):
            raise ConfigError(
                f"image size {self.image_size} with patch {self.patch} gives a {g}-cell grid; "
                f"needs an integer grid divisible by {2 ** (N_STAGES - 1)}")

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (stage - 1)

    def grid(self, stage: int) -> int:
        return self.image_size // self.patch // 2 ** (stage - 1)


@dataclass
class StageFeature:
    stage: int
    h: int
    w: int
    tokens: Tensor

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    @property
    def n_tokens(self) -> int:
        return self.h * self.w


def patchify(image: Tensor, p: int) -> Tensor:
    """``(B, C, H, W) -> (B, (H/p)(W/p), C*p*p)``, non-overlapping patches."""
    B, C, H, W = image.shape
    if H % p or W % p:
        raise ShapeError(f"image {H}x{W} is not divisible by patch size {p}")
    x = T.reshape(image, (B, C, H // p, p, W // p, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))
    return T.reshape(x, (B, (H // p) * (W // p), C * p * p))


def tokens_to_grid(x: Tensor, h: int, w: int) -> Tensor:
    """``(B, h*w, C) -> (B, C, h, w)``."""
    B, N, C = x.shape
    if N != h * w:
        raise ShapeError(f"{N} tokens do not fill a {h}x{w} grid")
    return T.transpose(T.reshape(x, (B, h, w, C)), (0, 3, 1, 2))


def grid_to_tokens(x: Tensor) -> Tensor:
    """``(B, C, h, w) -> (B, h*w, C)``."""
    B, C, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (B, h * w, C))


class PatchEmbed(Module):
    """Linear projection of p x p patches plus a learned absolute position
    table (zero at init, so the projection alone decides the start)."""

    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float64):
        self.patch = cfg.patch
        self.proj = Linear(cfg.in_channels * cfg.patch ** 2, cfg.base_channels, rng, dtype)
        g = cfg.grid(1)
        self.pos = Tensor(np.zeros((g * g, cfg.base_channels), dtype=dtype), requires_grad=True)

    def __call__(self, image: Tensor) -> Tensor:
        return T.add(self.proj(patchify(image, self.patch)), self.pos)


class PatchMerge(Module):
    """Concatenate each 2x2 neighbourhood (4C) then project to 2C."""

    def __init__(self, channels: int, rng, dtype=np.float64):
        self.norm = LayerNorm(4 * channels, dtype)
        self.reduce = Linear(4 * channels, 2 * channels, rng, dtype, bias=False)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        if h % 2 or w % 2:
            raise ShapeError(f"cannot merge an odd {h}x{w} token grid")
        B, N, C = x.shape
        x = T.reshape(x, (B, h // 2, 2, w // 2, 2, C))
        x = T.transpose(x, (0, 1, 3, 4, 2, 5))  # (B, h/2, w/2, dx, dy, C)
        x = T.reshape(x, (B, (h // 2) * (w // 2), 4 * C))
        return self.reduce(self.norm(x))


class EncoderStage(Module):
    def __init__(self, channels: int, heads: int, rng, dtype=np.float64):
        self.block = SelfAttentionBlock(channels, heads, rng, dtype)
        self.merge = PatchMerge(channels, rng, dtype)

    def __call__(self, x: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
        y, attn = self.block(x)
        return self.merge(y, h, w), attn


class VisualEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng, dtype=np.float64):
        self.cfg = cfg
        self.embed = PatchEmbed(cfg, rng, dtype)
        self.stages = [EncoderStage(cfg.channels(i), cfg.heads, rng, dtype)
                       for i in range(1, N_STAGES)]

    def patch_embed(self, image: Tensor) -> StageFeature:
        g = self.cfg.grid(1)
        return StageFeature(1, g, g, self.embed(image))

    def encode_stage(self, feat: StageFeature) -> tuple[StageFeature, Tensor]:
        i = feat.stage
        if not 1 <= i < N_STAGES:
            raise ConfigError(f"no encoder stage after stage {i}")
        out, attn = self.stages[i - 1](feat.tokens, feat.h, feat.w)
        return StageFeature(i + 1, feat.h // 2, feat.w // 2, out), attn

    def __call__(self, image: Tensor) -> list[StageFeature]:
        """Plain (unfused) pass returning V_1..V_4."""
        feats = [self.patch_embed(image)]
        for _ in range(1, N_STAGES):
            nxt, _ = self.encode_stage(feats[-1])
            feats.append(nxt)
        return feats
