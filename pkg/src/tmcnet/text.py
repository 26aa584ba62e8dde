"""Prompt tokenization and the small from-scratch language encoder.

The encoder exposes token features ``L`` (T x d_l), per-stage linear
projections ``L_i = L W_i + b_i`` (T x d) and ``CLS_i`` (row 0 of ``L_i``).
Between fusion stages the fused language tokens are lifted back to ``d_l``
and run through one refinement block, so stage ``i+1`` sees text that has
already attended to the image.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError
from .nn import LayerNorm, Linear, Module, SelfAttentionBlock
from .tensor import Tensor

PAD, CLS, UNK = 0, 1, 2
MAX_TOKENS = 10
_RESERVED = ("[PAD]", "[CLS]", "[UNK]")
_WORD = re.compile(r"[a-z0-9]+")

# closed vocabulary of the synthetic prompt grammar
GRAMMAR_WORDS = (
    "one", "two", "three", "target", "region", "regions",
    "upper", "lower", "left", "right", "and",
)


class Vocabulary:
    def __init__(self, tokens):
        self.itos: list[str] = list(_RESERVED)
        for tok in tokens:
            if tok not in self.itos:
                self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def default(cls) -> "Vocabulary":
        return cls(GRAMMAR_WORDS)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok, i in self.stoi.items():
                fh.write(f"{tok}\t{i}\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.strip():
                tok, idx = line.split("\t")
                pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise InputError(f"{path}: vocabulary ids are not dense from 0")
        if tuple(t for _, t in pairs[:3]) != _RESERVED:
            raise InputError(f"{path}: reserved ids 0/1/2 must be {_RESERVED}")
        return cls([t for _, t in pairs[3:]])


@dataclass
class TokenSeq:
    ids: np.ndarray
    attention_mask: np.ndarray


def split_words(prompt: str) -> list[str]:
    return _WORD.findall(prompt.lower())


def tokenize(prompt: str, vocab: Vocabulary, max_len: int = MAX_TOKENS) -> TokenSeq:
    words = split_words(prompt)
    if not words:
        raise InputError(f"empty prompt: {prompt!r}")
    ids = [CLS] + [vocab[w] for w in words]
    ids = ids[:max_len]
    mask = [1] * len(ids) + [0] * (max_len - len(ids))
    ids = ids + [PAD] * (max_len - len(ids))
    return TokenSeq(np.array(ids, dtype=np.int64), np.array(mask, dtype=np.int64))


def batch_tokens(seqs: list[TokenSeq]) -> tuple[np.ndarray, np.ndarray]:
    ids = np.stack([s.ids for s in seqs])
    mask = np.stack([s.attention_mask for s in seqs]).astype(bool)
    return ids, mask


class TextEncoder(Module):
    """Embedding table + learned positions + ``n_blocks`` self-attention blocks."""

    def __init__(self, vocab_size: int, d_l: int, heads: int, n_blocks: int, rng,
                 dtype=np.float64, max_len: int = MAX_TOKENS):
        self.vocab_size = vocab_size
        self.embed = Tensor(rng.normal(0.0, 1.0, (vocab_size, d_l)).astype(dtype), requires_grad=True)
        self.pos = Tensor(rng.normal(0.0, 1.0, (max_len, d_l)).astype(dtype), requires_grad=True)
        self.norm = LayerNorm(d_l, dtype)
        self.blocks = [SelfAttentionBlock(d_l, heads, rng, dtype) for _ in range(n_blocks)]

    def __call__(self, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, list[Tensor]]:
        ids = np.asarray(ids)
        if ids.min() < 0 or ids.max() >= self.vocab_size:
            bad = int(ids[(ids < 0) | (ids >= self.vocab_size)][0])
            raise InputError(f"token id {bad} outside vocabulary of size {self.vocab_size}")
        x = T.add(T.embedding(self.embed, ids), self.pos)
        x = self.norm(x)
        weights = []
        for blk in self.blocks:
            x, w = blk(x, key_mask=mask)
            weights.append(w)
        return x, weights


class TextRefiner(Module):
    """Lifts fused language tokens (width d) back to d_l and refines them."""

    def __init__(self, d: int, d_l: int, heads: int, rng, dtype=np.float64):
        self.lift = Linear(d, d_l, rng, dtype)
        self.block = SelfAttentionBlock(d_l, heads, rng, dtype)

    def __call__(self, L: Tensor, fused: Tensor, mask) -> tuple[Tensor, Tensor]:
        return self.block(T.add(L, self.lift(fused)), key_mask=mask)


@dataclass
class TextFeatures:
    """Token features plus the per-stage projections that read them."""

    L: Tensor
    mask: np.ndarray
    stage_proj: dict[int, Linear] = field(default_factory=dict)

    def project(self, stage: int) -> tuple[Tensor, Tensor]:
        return project_stage(self, stage)


def project_stage(feats: TextFeatures, stage: int) -> tuple[Tensor, Tensor]:
    """``(L_i, CLS_i)`` with ``L_i = L W_i + b_i`` and ``CLS_i = L_i[..., 0:1, :]``."""
    if stage not in feats.stage_proj:
        raise ConfigError(f"stage {stage} is not a selected fusion stage "
                          f"(selected: {sorted(feats.stage_proj)})")
    L_i = feats.stage_proj[stage](feats.L)
    cls_i = T.getitem(L_i, (..., slice(0, 1), slice(None)))
    return L_i, cls_i


def encode_text(tokens, encoder: TextEncoder, stage_proj: dict[int, Linear]) -> TextFeatures:
    """Encode one :class:`TokenSeq` or a batch ``(ids, mask)`` of them."""
    if isinstance(tokens, TokenSeq):
        ids, mask = tokens.ids, tokens.attention_mask.astype(bool)
    else:
        ids, mask = tokens
    L, _ = encoder(ids, mask)
    return TextFeatures(L=L, mask=np.asarray(mask, dtype=bool), stage_proj=stage_proj)
