"""Incremental sample condensation: per-row attention over representation
segments, then row attention whose key set is the query row plus the rows
flagged as coming from the inference pool.

The row-attention mask is additive and applied before the softmax, so
excluded rows get weight exactly 0 (the large negative constant underflows
in the exp). With no inference rows in a batch, every row reduces to
single-key attention over itself.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .nn import FeedForward, LayerNorm, Module, MultiHeadAttention
from .tensor import MASK_VALUE, Tensor


@dataclass(frozen=True)
class ISCConfig:
    segment_dim: int = 32
    segments: int = 3
    heads: int = 4
    depth: int = 2
    ff_mult: int = 2
    key_dim: int = 32

    @property
    def width(self) -> int:
        return self.segment_dim * self.segments


def iisa_attention(q: Tensor, k: Tensor, v: Tensor,
                   inference_mask: np.ndarray) -> tuple[Tensor, Tensor]:
    """Row attention of one query set against self-plus-inference keys.

    q, k: (batch, d_k); v: (batch, d_v); mask[j] marks inference rows.
    Returns (outputs (batch, d_v), attention weights (batch, batch)).
    """
    b, d_k = q.shape
    if b == 0:
        raise ValueError("empty batch")
    if len(inference_mask) != b:
        raise ValueError("mask length must equal batch size")
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d_k))
    allowed = np.broadcast_to(np.asarray(inference_mask, dtype=bool), (b, b)).copy()
    np.fill_diagonal(allowed, True)
    additive = np.where(allowed, 0.0, MASK_VALUE)
    weights = T.softmax(T.add(scores, additive), axis=1)
    return T.matmul(weights, v), weights


class IISA(Module):
    """Projection wrapper around the row-attention core."""

    def __init__(self, dim: int, key_dim: int, rng: np.random.Generator):
        super().__init__()
        self.wq = self.child("wq", nn.Linear(dim, key_dim, rng))
        self.wk = self.child("wk", nn.Linear(dim, key_dim, rng))
        self.wv = self.child("wv", nn.Linear(dim, dim, rng))
        self.wout = self.child("wout", nn.Linear(dim, dim, rng))

    def forward(self, h: Tensor, inference_mask: np.ndarray,
                row_attention: str = "inference") -> Tensor:
        mask = inference_mask
        if row_attention == "all":
            mask = np.ones(h.shape[0], dtype=bool)
        elif row_attention != "inference":
            raise ValueError(f"unknown row_attention mode {row_attention!r}")
        out, _ = iisa_attention(self.wq(h), self.wk(h), self.wv(h), mask)
        return self.wout(out)

    __call__ = forward


class ISCBlock(Module):
    """One condensation block: segment MSA, then masked row attention,
    then feed-forward, each with residual and norm."""

    def __init__(self, config: ISCConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        w = config.segment_dim
        self.msa_norm = self.child("msa_norm", LayerNorm(w))
        self.msa_attn = self.child("msa_attn",
                                   MultiHeadAttention(w, config.heads, rng))
        self.row_norm = self.child("row_norm", LayerNorm(config.width))
        self.row_attn = self.child("row_attn", IISA(config.width, config.key_dim, rng))
        self.ff_norm = self.child("ff_norm", LayerNorm(config.width))
        self.ff = self.child("ff", FeedForward(config.width, config.ff_mult, rng))

    def msa(self, tokens: Tensor) -> Tensor:
        """Self-attention across a row's segments (residual + norm)."""
        return T.add(tokens, self.msa_attn(self.msa_norm(tokens)))

    def forward(self, h: Tensor, inference_mask: np.ndarray,
                row_attention: str = "inference") -> Tensor:
        b = h.shape[0]
        c = self.config
        tokens = T.reshape(h, (b, c.segments, c.segment_dim))
        tokens = self.msa(tokens)
        h = T.reshape(tokens, (b, c.width))
        h = T.add(h, self.row_attn(self.row_norm(h), inference_mask, row_attention))
        return T.add(h, self.ff(self.ff_norm(h)))

    __call__ = forward


class ISCStack(Module):
    def __init__(self, config: ISCConfig, rng: np.random.Generator):
        super().__init__()
        if config.depth < 1:
            raise ValueError("depth must be >= 1")
        self.config = config
        self.blocks = [self.child(f"block{i}", ISCBlock(config, rng))
                       for i in range(config.depth)]
        self.out_norm = self.child("out_norm", LayerNorm(config.width))

    def forward(self, r: Tensor, inference_mask: np.ndarray,
                row_attention: str = "inference") -> Tensor:
        h = r
        for block in self.blocks:
            h = block(h, inference_mask, row_attention)
        return self.out_norm(h)

    __call__ = forward


def isc_forward(r: Tensor, stack: ISCStack, inference_mask: np.ndarray,
                row_attention: str = "inference") -> Tensor:
    return stack(r, inference_mask, row_attention)
