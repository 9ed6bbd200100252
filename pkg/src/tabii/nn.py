"""Model building blocks over the tape engine.

Modules register parameters by name so checkpointing, freezing and optimizer
construction can walk a model uniformly. Initialization is driven by the
numpy Generator handed to each constructor, which keeps whole-model builds
reproducible from a single seed.
"""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class Module:
    def __init__(self):
        self._params: dict[str, Parameter] = {}
        self._children: dict[str, "Module"] = {}
        self.training = True

    def param(self, name: str, data, trainable: bool = True) -> Parameter:
        p = Parameter(np.asarray(data, dtype=np.float64), trainable=trainable)
        self._params[name] = p
        return p

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> dict[str, Parameter]:
        out = {}
        for name, p in self._params.items():
            out[prefix + name] = p
        for cname, child in self._children.items():
            out.update(child.named_parameters(prefix=f"{prefix}{cname}."))
        return out

    def parameters(self) -> list[Parameter]:
        return list(self.named_parameters().values())

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.trainable]

    def set_training(self, flag: bool) -> "Module":
        self.training = flag
        for child in self._children.values():
            child.set_training(flag)
        return self

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.freeze()
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        if missing:
            raise KeyError(f"missing parameters in state: {sorted(missing)[:4]}")
        for k, p in params.items():
            a = np.asarray(arrays[k], dtype=p.data.dtype)
            if a.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {k}: {a.shape} vs {p.data.shape}")
            p.data = a.copy()


def uniform_init(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, scale: float | None = None):
        super().__init__()
        s = scale if scale is not None else 1.0 / math.sqrt(d_in)
        self.w = self.param("w", uniform_init(rng, (d_in, d_out), s))
        self.b = self.param("b", np.zeros(d_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.w)
        if self.b is not None:
            y = T.add(y, self.b)
        return y

    __call__ = forward


class Embedding(Module):
    def __init__(self, n_items: int, dim: int, rng: np.random.Generator):
        super().__init__()
        self.table = self.param("table", uniform_init(rng, (n_items, dim), 1.0 / math.sqrt(dim)))

    def forward(self, indices) -> Tensor:
        return T.embedding_lookup(self.table, indices)

    __call__ = forward


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.gain = self.param("gain", np.ones(dim))
        self.bias = self.param("bias", np.zeros(dim))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.add(T.mul(T.layer_norm(x, eps=self.eps), self.gain), self.bias)

    __call__ = forward


class FeedForward(Module):
    def __init__(self, dim: int, mult: int, rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        self.lin1 = self.child("lin1", Linear(dim, dim * mult, rng))
        self.lin2 = self.child("lin2", Linear(dim * mult, dim, rng))
        self.dropout = dropout
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        h = self.lin2(T.relu(self.lin1(x)))
        return T.dropout(h, self.dropout, self._rng, training=self.training)

    __call__ = forward


class MultiHeadAttention(Module):
    """Self-attention over (batch, tokens, dim).

    Projection weights are raw parameters (not Linear children) so a caller
    can pass additive low-rank deltas keyed by 'wq'/'wk'/'wv'/'wo'.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dropout: float = 0.0):
        super().__init__()
        if dim % heads != 0:
            raise ValueError("dim must be divisible by heads")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        s = 1.0 / math.sqrt(dim)
        for name in ("wq", "wk", "wv", "wo"):
            self.param(name, uniform_init(rng, (dim, dim), s))
        self.bo = self.param("bo", np.zeros(dim))
        self.dropout = dropout
        self._rng = rng

    def _proj(self, x: Tensor, name: str, delta: dict | None) -> Tensor:
        w = self._params[name]
        if delta is not None and name in delta:
            w = T.add(w, delta[name])
        return T.matmul(x, w)

    def forward(self, x: Tensor, delta: dict | None = None) -> Tensor:
        b, t, d = x.shape
        h, hd = self.heads, self.head_dim

        def split(v: Tensor) -> Tensor:
            return T.transpose(T.reshape(v, (b, t, h, hd)), (0, 2, 1, 3))

        q = split(self._proj(x, "wq", delta))
        k = split(self._proj(x, "wk", delta))
        v = split(self._proj(x, "wv", delta))
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(hd))
        attn = T.softmax(scores, axis=-1)
        attn = T.dropout(attn, self.dropout, self._rng, training=self.training)
        ctx = T.matmul(attn, v)
        merged = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return T.add(self._proj(merged, "wo", delta), self.bo)

    __call__ = forward


class TransformerBlock(Module):
    """Pre-norm block: x + MHA(LN(x)); x + FF(LN(x))."""

    def __init__(self, dim: int, heads: int, ff_mult: int, rng: np.random.Generator,
                 dropout: float = 0.0):
        super().__init__()
        self.norm1 = self.child("norm1", LayerNorm(dim))
        self.attn = self.child("attn", MultiHeadAttention(dim, heads, rng, dropout=dropout))
        self.norm2 = self.child("norm2", LayerNorm(dim))
        self.ff = self.child("ff", FeedForward(dim, ff_mult, rng, dropout=dropout))

    def forward(self, x: Tensor, delta: dict | None = None) -> Tensor:
        x = T.add(x, self.attn(self.norm1(x), delta=delta))
        return T.add(x, self.ff(self.norm2(x)))

    __call__ = forward


class MLP(Module):
    def __init__(self, d_in: int, hidden: Sequence[int], d_out: int,
                 rng: np.random.Generator, activation: str = "relu"):
        super().__init__()
        act = {"relu": T.relu, "tanh": T.tanh, "gelu": T.gelu}.get(activation)
        if act is None:
            raise ValueError(f"unknown activation: {activation}")
        self.act = act
        dims = [d_in, *hidden, d_out]
        self.layers = [
            self.child(f"layer{i}", Linear(a, b, rng))
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)

    __call__ = forward


def cross_entropy(logits: Tensor, labels: np.ndarray,
                  weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer labels under row logits;
    optionally a weighted mean (weights normalized to sum 1)."""
    labels = np.asarray(labels)
    ls = T.log_softmax(logits, axis=1)
    picked = T.getitem(ls, (np.arange(labels.shape[0]), labels))
    if weights is None:
        return T.mul(T.mean(picked), -1.0)
    w = np.asarray(weights, dtype=np.float64)
    return T.mul(T.sum_(T.mul(picked, w / w.sum())), -1.0)


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())
