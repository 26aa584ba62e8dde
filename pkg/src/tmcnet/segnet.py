"""Full text-guided segmentation network.

Data flow for a batch (stage grids g_i = image/patch/2^(i-1)):

* text: encoder -> L; at fusion stage i, ``L_i = L W_i + b_i``;
* visual: V_1 = patch embedding; at fusion stage i the pre-fusion V_i feeds
  the alignment term, then MCM produces F_V^i, and the encoder continues
  from ``V_i + out_proj(F_V^i)``;
* CNN path: X_1 = stem(image), X_{i+1} = DownCNN_i([X_i, F_V^i]);
* ViT path: Y_1 = V_1, Y_{i+1} = DownViT_i([Y_i, F_V^i]);
* decoder: Z_4 = merge(X_4, Y_4), Z_{i-1} = UpCNN_i([Z_i, F_V^i, X_i]) where
  every concat operand sits on grid g_i and UpCNN starts by upsampling x2;
* head: 1x1 conv on Z_0 (grid 2*g_1), nearest upsample to the image size,
  sigmoid.

Stages outside the fusion set simply leave F_V^i out of every concat.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .cross import AlignmentHead, FusedPair, MCMStage, ma_loss_stage, ma_loss_total
from .errors import ConfigError
from .nn import Conv2d, ConvNormAct, LayerNorm, Linear, Module, SelfAttentionBlock
from .tensor import ShapeError, Tensor
from .text import MAX_TOKENS, TextEncoder, TextFeatures, TextRefiner, project_stage
from .visual import (N_STAGES, EncoderConfig, PatchMerge, StageFeature, VisualEncoder,
                     grid_to_tokens, tokens_to_grid)


@dataclass
class ModelConfig:
    image_size: int = 32
    in_channels: int = 1
    patch: int = 4
    base_channels: int = 8
    d: int = 16
    d_l: int = 32
    heads: int = 2
    text_blocks: int = 2
    vocab_size: int = 14
    max_tokens: int = MAX_TOKENS
    fusion_stages: tuple[int, ...] = (2, 3, 4)
    align_dim: int = 0  # 0 -> same as d
    mcm_on: bool = True
    align_on: bool = True
    align_mode: str = "paper-literal"

    def __post_init__(self):
        self.fusion_stages = tuple(sorted(int(s) for s in self.fusion_stages))
        if self.patch < 2 or self.patch % 2:
            raise ConfigError(f"patch size {self.patch} must be even")
        if self.d % self.heads or self.d_l % self.heads:
            raise ConfigError(f"d={self.d}, d_l={self.d_l} must be divisible by heads={self.heads}")
        if self.align_on and not self.fusion_stages:
            raise ConfigError("alignment enabled but no fusion stages selected")
        self.encoder_config()

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.image_size, self.in_channels, self.patch,
                             self.base_channels, self.fusion_stages, self.heads)

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** (max(stage, 1) - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class SegOutput:
    prob: Tensor                      # (B, 1, H, W)
    logits: Tensor                    # (B, 1, H, W)
    align_terms: dict[int, Tensor] = field(default_factory=dict)
    align_loss: Tensor | None = None
    stage_cache: dict[int, dict] = field(default_factory=dict)
    attention: list[Tensor] = field(default_factory=list)
    trace: list[str] = field(default_factory=list)
    # (channels, height, width) per stage for the token path and the CNN path
    stage_shapes: dict[str, list[tuple[int, int, int]]] = field(default_factory=dict)


class DownViT(Module):
    def __init__(self, c_in: int, channels: int, heads: int, rng, dtype):
        self.inp = Linear(c_in, channels, rng, dtype)
        self.block = SelfAttentionBlock(channels, heads, rng, dtype)
        self.merge = PatchMerge(channels, rng, dtype)

    def __call__(self, y: Tensor, h: int, w: int) -> tuple[Tensor, Tensor]:
        z, attn = self.block(self.inp(y))
        return self.merge(z, h, w), attn


class UpCNN(Module):
    """upsample x2 -> 3x3 conv -> norm -> relu -> 3x3 conv."""

    def __init__(self, c_in: int, c_out: int, rng, dtype):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, dtype, pad=1)
        self.norm = LayerNorm(c_out, dtype)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, dtype, pad=1)

    def __call__(self, x: Tensor) -> Tensor:
        x = T.upsample2x(x)
        x = T.relu(self.norm(self.conv1(x), axis=-3))
        return self.conv2(x)


class TMCNet(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.dtype = dtype
        S = cfg.fusion_stages
        d, d_l, h = cfg.d, cfg.d_l, cfg.heads
        D = cfg.align_dim or d
        C = cfg.channels

        self.text = TextEncoder(cfg.vocab_size, d_l, h, cfg.text_blocks, rng, dtype, cfg.max_tokens)
        self.stage_proj = {i: Linear(d_l, d, rng, dtype) for i in S}
        self.refiners = {i: TextRefiner(d, d_l, h, rng, dtype) for i in S[:-1]}
        self.visual = VisualEncoder(cfg.encoder_config(), rng, dtype)
        self.mcm = {i: MCMStage(C(i), d, h, rng, dtype) for i in S}
        self.align = {i: AlignmentHead(C(i), d, D, rng, dtype) for i in S}

        p = cfg.patch
        self.stem = [ConvNormAct(cfg.in_channels, C(1), p, rng, dtype, stride=p),
                     ConvNormAct(C(1), C(1), 3, rng, dtype, pad=1)]
        extra = {i: (d if i in S else 0) for i in range(1, N_STAGES + 1)}
        self.down_cnn = [ConvNormAct(C(i) + extra[i], C(i + 1), 4, rng, dtype, stride=2, pad=1)
                         for i in range(1, N_STAGES)]
        self.down_vit = [DownViT(C(i) + extra[i], C(i), h, rng, dtype) for i in range(1, N_STAGES)]
        self.bottleneck = ConvNormAct(2 * C(N_STAGES), C(N_STAGES), 3, rng, dtype, pad=1)
        # UpCNN_i consumes [Z_i, F_V^i, X_i] on grid i and emits Z_{i-1}
        self.up_cnn = [UpCNN(2 * C(i) + extra[i], C(i - 1), rng, dtype) for i in range(1, N_STAGES + 1)]
        self.head = Conv2d(C(1), 1, 1, rng, dtype)

    # ------------------------------------------------------------------ steps
    def down_step(self, X: Tensor, Y: Tensor, F_V_grid: Tensor | None, stage: int, g: int):
        """One dual-path down step: returns ``(X_{i+1}, Y_{i+1}, attn)``."""
        if F_V_grid is not None:
            if F_V_grid.shape[-2:] != X.shape[-2:]:
                raise ShapeError(f"F_V grid {F_V_grid.shape[-2:]} does not match stage {stage} grid {X.shape[-2:]}")
            X_t = T.concat_channels([X, F_V_grid])
            Y_t = T.concat([Y, grid_to_tokens(F_V_grid)], axis=-1)
        else:
            X_t, Y_t = X, Y
        X_next = self.down_cnn[stage - 1](X_t)
        Y_next, attn = self.down_vit[stage - 1](Y_t, g, g)
        return X_next, Y_next, attn

    def up_step(self, Z: Tensor, F_V_grid: Tensor | None, X: Tensor, stage: int) -> Tensor:
        parts = [Z] + ([F_V_grid] if F_V_grid is not None else []) + [X]
        return self.up_cnn[stage - 1](T.concat_channels(parts))

    # ---------------------------------------------------------------- forward
    def forward(self, image, ids=None, mask=None, text_ablation: bool = False,
                trace: bool = False) -> SegOutput:
        cfg = self.cfg
        img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.dtype))
        if img.ndim == 3:
            img = T.reshape(img, (1,) + img.shape)
        if img.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ShapeError(f"image {img.shape[-2:]} does not match configured size {cfg.image_size}")
        B = img.shape[0]
        S = cfg.fusion_stages
        use_text = cfg.mcm_on and not text_ablation
        need_text = (use_text or cfg.align_on) and S
        out_trace: list[str] = []

        L = None
        attn_log: list[Tensor] = []
        if need_text:
            if ids is None:
                raise ConfigError("text ids required when MCM or alignment is enabled")
            ids = np.asarray(ids).reshape(B, -1)
            mask = np.asarray(mask, dtype=bool).reshape(B, -1)
            L, text_attn = self.text(ids, mask)
            attn_log += text_attn
            feats = TextFeatures(L=L, mask=mask, stage_proj=self.stage_proj)

        V = self.visual.patch_embed(img)
        F_grids: dict[int, Tensor] = {}
        cache: dict[int, dict] = {}
        align_terms: dict[int, Tensor] = {}
        Vs = [V]
        for i in range(1, N_STAGES + 1):
            if i in S:
                entry = {"V": V.tokens}
                if need_text:
                    L_i, cls_i = project_stage(feats, i)
                if cfg.align_on:
                    out_trace.append(f"align:{i}")
                    term = ma_loss_stage(V.tokens, cls_i, self.align[i], cfg.align_mode)
                    align_terms[i] = term.loss
                    entry["s"] = term.s
                mcm = self.mcm[i]
                V_d = mcm.project(V.tokens)
                if use_text:
                    out_trace.append(f"mcm:{i}")
                    pair: FusedPair = mcm(V_d, L_i, mask)
                    F_V = pair.F_V
                    entry["attn_VL"] = pair.attn_VL
                    attn_log += [pair.attn_VL, pair.attn_LV]
                    if i in self.refiners:
                        L, ref_attn = self.refiners[i](L, pair.F_L, mask)
                        attn_log.append(ref_attn)
                        feats = TextFeatures(L=L, mask=mask, stage_proj=self.stage_proj)
                else:
                    F_V = V_d
                entry["F_V"] = F_V
                cache[i] = entry
                F_grids[i] = tokens_to_grid(F_V, V.h, V.w)
                cont = T.add(V.tokens, mcm.out_proj(F_V))
            else:
                cont = V.tokens
            if i < N_STAGES:
                V, attn = self.visual.encode_stage(StageFeature(i, V.h, V.w, cont))
                attn_log.append(attn)
                Vs.append(V)

        X = img
        for layer in self.stem:
            X = layer(X)
        Y = Vs[0].tokens
        Xs = [X]
        for i in range(1, N_STAGES):
            g = Vs[i - 1].h
            X, Y, attn = self.down_step(X, Y, F_grids.get(i), i, g)
            attn_log.append(attn)
            Xs.append(X)

        g4 = Vs[-1].h
        Z = self.bottleneck(T.concat_channels([X, tokens_to_grid(Y, g4, g4)]))
        for i in range(N_STAGES, 0, -1):
            Z = self.up_step(Z, F_grids.get(i), Xs[i - 1], i)

        logits = T.upsample_nearest(self.head(Z), cfg.patch // 2)
        if logits.shape[-1] != cfg.image_size:
            raise ShapeError(f"decoder produced {logits.shape[-2:]}, expected {cfg.image_size}")
        prob = T.sigmoid(logits)
        align_loss = ma_loss_total(list(align_terms.values())) if align_terms else None
        shapes = {"tokens": [(v.channels, v.h, v.w) for v in Vs],
                  "cnn": [tuple(x.shape[1:]) for x in Xs]}
        return SegOutput(prob=prob, logits=logits, align_terms=align_terms, align_loss=align_loss,
                         stage_cache=cache, attention=attn_log, trace=out_trace if trace else [],
                         stage_shapes=shapes)

    __call__ = forward

    # -------------------------------------------------------------- utilities
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(extra)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)
