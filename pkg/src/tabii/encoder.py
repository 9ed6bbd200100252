"""Tabular backbone: per-column feature tokenizer plus transformer encoder.

Houses the discard-mode baseline (the model trained on the original columns)
and the direct variant that replaces per-column tokenization with one shared
linear map so it can be fed any input width at inference time.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .data import ColumnSpec, EncodedBatch, IncrementalScenario
from .nn import Linear, Module, TransformerBlock, cross_entropy
from .tensor import Adam, Tensor, backward


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 32
    layers: int = 3
    heads: int = 4
    ff_mult: int = 2
    dropout: float = 0.1

    def __post_init__(self):
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    patience: int = 10


class FeatureTokenizer(Module):
    """One learned token per column: value*w_j + b_j for numeric columns, an
    embedding lookup for categorical ones, plus a missing-indicator vector.

    Scale/bias/indicator vectors are stored stacked (columns, dim) so a whole
    batch tokenizes in a handful of broadcast ops; categorical columns add
    their embedding through a one-hot column selector.
    """

    def __init__(self, columns: list[ColumnSpec], n_categories: dict[str, int],
                 dim: int, rng: np.random.Generator, inert: bool = False):
        """`inert` builds zero-initialized, value-only tokens for columns
        grafted on after training: a zero-padded slot and a real value are
        then indistinguishable until gradients say otherwise (the adapter
        path still consumes the missing indicators)."""
        super().__init__()
        self.columns = list(columns)
        self.dim = dim
        self.inert = inert
        f = len(self.columns)
        s = 1.0 / math.sqrt(dim)
        if inert:
            self.scale = self.param("scale", np.zeros((f, dim)))
            self.bias = self.param("bias", np.zeros((f, dim)))
            self.miss = None
        else:
            self.scale = self.param("scale", nn.uniform_init(rng, (f, dim), s))
            self.bias = self.param("bias", nn.uniform_init(rng, (f, dim), s))
            self.miss = self.param("miss", nn.uniform_init(rng, (f, dim), s))
        self._cat_cols = [j for j, c in enumerate(self.columns) if c.kind == "categorical"]
        for j in self._cat_cols:
            n_cat = max(n_categories[self.columns[j].name], 1)
            init = (np.zeros((max(n_categories[self.columns[j].name], 1), dim))
                    if inert else
                    nn.uniform_init(rng, (n_cat, dim), s))
            self.param(f"emb{j}", init)

    def forward(self, batch: EncodedBatch) -> Tensor:
        if batch.n_features != len(self.columns):
            raise ValueError(f"batch has {batch.n_features} features, "
                             f"tokenizer was built for {len(self.columns)}")
        tok = T.add(T.mul(Tensor(batch.numeric[:, :, None]), self.scale), self.bias)
        if self.miss is not None:
            tok = T.add(tok, T.mul(Tensor(batch.missing[:, :, None]), self.miss))
        for j in self._cat_cols:
            emb = T.embedding_lookup(self._params[f"emb{j}"], batch.cat[:, j])
            selector = np.zeros((1, batch.n_features, 1))
            selector[0, j, 0] = 1.0
            tok = T.add(tok, T.mul(T.reshape(emb, (batch.n_rows, 1, self.dim)), selector))
        return tok

    __call__ = forward


class Backbone(Module):
    """CLS token + transformer stack + final norm."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.cls = self.param("cls", nn.uniform_init(rng, (1, 1, config.embed_dim),
                                                     1.0 / math.sqrt(config.embed_dim)))
        self.blocks = [
            self.child(f"block{i}", TransformerBlock(config.embed_dim, config.heads,
                                                     config.ff_mult, rng,
                                                     dropout=config.dropout))
            for i in range(config.layers)
        ]
        self.final_norm = self.child("final_norm", nn.LayerNorm(config.embed_dim))

    def forward(self, tokens: Tensor) -> Tensor:
        b = tokens.shape[0]
        cls = T.add(self.cls, np.zeros((b, 1, self.config.embed_dim)))
        x = T.concat([cls, tokens], axis=1)
        for block in self.blocks:
            x = block(x)
        x = self.final_norm(x)
        return x[:, 0, :]

    __call__ = forward


class OriginalModel(Module):
    """Backbone classifier over the training view's columns."""

    def __init__(self, scenario: IncrementalScenario, config: BackboneConfig, seed: int):
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        cols = scenario.feature_columns("train")
        n_cat = {c.name: scenario.stats_for(c).n_categories for c in cols}
        self.tokenizer = self.child("tokenizer",
                                    FeatureTokenizer(cols, n_cat, config.embed_dim, rng))
        self.backbone = self.child("backbone", Backbone(config, rng))
        self.head = self.child("head", Linear(config.embed_dim, scenario.n_classes, rng))
        self.config = config
        self.seed = seed
        self.n_classes = scenario.n_classes
        self.trained = False
        self.sees_incremental = False

    def cls_vector(self, batch: EncodedBatch, extra_tokens: Tensor | None = None) -> Tensor:
        n_own = len(self.tokenizer.columns)
        own = batch if batch.n_features == n_own else _original_slice(batch, n_own)
        tokens = self.tokenizer(own)
        if extra_tokens is not None:
            tokens = T.concat([tokens, extra_tokens], axis=1)
        return self.backbone(tokens)

    def logits(self, batch: EncodedBatch) -> Tensor:
        return self.head(self.cls_vector(batch))

    def predict(self, batch: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
        self.set_training(False)
        probs = T.softmax(self.logits(batch), axis=1).data
        return probs.argmax(axis=1), probs

    def representations(self, batch: EncodedBatch) -> np.ndarray:
        """Pre-head vectors (the t path) for analysis probes."""
        self.set_training(False)
        return self.cls_vector(batch).data


def _original_slice(batch: EncodedBatch, n: int) -> EncodedBatch:
    """Project a full-arity batch onto its first n (original) columns."""
    return EncodedBatch(batch.numeric[:, :n], batch.cat[:, :n],
                        batch.missing[:, :n], batch.columns[:n])


def _train_classifier(model: Module, logits_fn, scenario: IncrementalScenario,
                      view: str, settings: TrainSettings, seed: int) -> dict:
    """Cross-entropy training on the train split with early stopping on
    validation accuracy. Returns the fit history."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF17)))
    train_batch = scenario.encode("train", view)
    train_labels = scenario.labels("train")
    val_batch = scenario.encode("val", view)
    val_labels = scenario.labels("val")
    if train_batch.n_rows == 0:
        raise ValueError("empty train split")

    opt = Adam(model.trainable_parameters(), lr=settings.lr)
    n = train_batch.n_rows
    best_acc, best_state, best_epoch = -1.0, None, -1
    history = []
    for epoch in range(settings.epochs):
        model.set_training(True)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, settings.batch_size):
            idx = order[start:start + settings.batch_size]
            if len(idx) < 2:
                continue
            opt.zero_grad()
            loss = cross_entropy(logits_fn(train_batch.take(idx)), train_labels[idx])
            backward(loss)
            opt.step()
            epoch_loss += loss.item() * len(idx)
        model.set_training(False)
        val_probs = T.softmax(logits_fn(val_batch), axis=1).data
        val_acc = nn.accuracy(val_probs, val_labels)
        history.append({"epoch": epoch, "train_loss": epoch_loss / n, "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc, best_epoch = val_acc, epoch
            best_state = model.state_arrays()
        elif epoch - best_epoch >= settings.patience:
            break
    if best_state is not None:
        model.load_state_arrays(best_state)
    model.set_training(False)
    return {"best_val_acc": best_acc, "best_epoch": best_epoch, "history": history}


def train_original(scenario: IncrementalScenario, config: BackboneConfig = BackboneConfig(),
                   settings: TrainSettings = TrainSettings(), seed: int = 0) -> OriginalModel:
    model = OriginalModel(scenario, config, seed)
    model.fit_info = _train_classifier(model, model.logits, scenario, "train", settings, seed)
    model.trained = True
    return model


class DirectVariant(Module):
    """Shared linear embedding over the raw feature vector, reshaped into a
    fixed number of tokens; the input width can grow at inference time.

    New input slots route through untrained weights: `extension_init`
    "random" draws them from the training-time init distribution,
    "zero" leaves them exactly zero (incremental values are then inert).
    """

    def __init__(self, scenario: IncrementalScenario, config: BackboneConfig, seed: int,
                 n_tokens: int = 4, extension_init: str = "random"):
        super().__init__()
        if extension_init not in ("random", "zero"):
            raise ValueError(f"unknown extension_init {extension_init!r}")
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD12)))
        self.n_train_features = len(scenario.feature_columns("train"))
        dim = config.embed_dim
        self.n_tokens = n_tokens
        self.dim = dim
        self.init_scale = 1.0 / math.sqrt(self.n_train_features)
        self.embed_w = self.param("embed_w", nn.uniform_init(
            rng, (self.n_train_features, n_tokens * dim), self.init_scale))
        self.embed_b = self.param("embed_b", np.zeros(n_tokens * dim))
        self.backbone = self.child("backbone", Backbone(config, rng))
        self.head = self.child("head", Linear(dim, scenario.n_classes, rng))
        self.extension_init = extension_init
        self._extension_seed = int(np.random.SeedSequence((seed, 0xE27)).generate_state(1)[0])
        self._extension: np.ndarray | None = None
        self.trained = False
        self.sees_incremental = True

    @staticmethod
    def raw_vector(batch: EncodedBatch) -> np.ndarray:
        """Scalar per feature: z-scored value, or a centered category index."""
        raw = batch.numeric.copy()
        for j, c in enumerate(batch.columns):
            if c.kind == "categorical":
                raw[:, j] = batch.cat[:, j].astype(np.float64) - 0.5
        raw[batch.missing > 0.5] = 0.0
        return raw

    def _weights_for(self, width: int) -> Tensor:
        if width == self.n_train_features:
            return self.embed_w
        if width < self.n_train_features:
            raise ValueError("input narrower than the training features")
        extra = width - self.n_train_features
        if self._extension is None or self._extension.shape[0] != extra:
            if self.extension_init == "zero":
                self._extension = np.zeros((extra, self.n_tokens * self.dim))
            else:
                # untrained weights, statistically matched to the trained map:
                # new inputs route through rows that look like the rest of W
                # but never saw a gradient
                ext_rng = np.random.default_rng(self._extension_seed)
                rms = float(np.sqrt(np.mean(self.embed_w.data ** 2)))
                self._extension = ext_rng.normal(
                    scale=rms, size=(extra, self.n_tokens * self.dim))
        return T.concat([self.embed_w, Tensor(self._extension)], axis=0)

    def logits(self, batch: EncodedBatch) -> Tensor:
        raw = self.raw_vector(batch)
        w = self._weights_for(raw.shape[1])
        flat = T.add(T.matmul(Tensor(raw), w), self.embed_b)
        tokens = T.reshape(flat, (raw.shape[0], self.n_tokens, self.dim))
        return self.head(self.backbone(tokens))

    def predict(self, batch: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
        self.set_training(False)
        probs = T.softmax(self.logits(batch), axis=1).data
        return probs.argmax(axis=1), probs

    def representations(self, batch: EncodedBatch) -> np.ndarray:
        self.set_training(False)
        raw = self.raw_vector(batch)
        w = self._weights_for(raw.shape[1])
        flat = T.add(T.matmul(Tensor(raw), w), self.embed_b)
        tokens = T.reshape(flat, (raw.shape[0], self.n_tokens, self.dim))
        return self.backbone(tokens).data


def train_direct(scenario: IncrementalScenario, config: BackboneConfig = BackboneConfig(),
                 settings: TrainSettings = TrainSettings(), seed: int = 0,
                 extension_init: str = "random") -> DirectVariant:
    model = DirectVariant(scenario, config, seed, extension_init=extension_init)
    model.fit_info = _train_classifier(model, model.logits, scenario, "train", settings, seed)
    model.trained = True
    return model


def direct_variant_predict(model: DirectVariant,
                           batch: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
    return model.predict(batch)
