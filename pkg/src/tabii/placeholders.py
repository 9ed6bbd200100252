"""The three-path row representation: zero-padded tabular path, low-rank
adapted pretrained encoder path, and the text-embedding path.

The pretrained path is a locally self-supervised set-style encoder (shared
per-cell value map, so any column count fits) trained by masked-cell
reconstruction; adaptation never touches its frozen weights, only low-rank
factors on the attention projections, anchored by a Fisher-weighted penalty.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nn
from . import tensor as T
from .data import EncodedBatch, IncrementalScenario, UNK_INDEX
from .nn import Linear, Module, TransformerBlock
from .tensor import Adam, Parameter, Tensor, backward

DEFAULT_PROMPT_TEMPLATE = (
    "The task is to predict {target} using the given tabular data, where "
    "{feature description} is initially provided. Later, {incremental features} "
    "will be added. The model should pay particular attention to these newly "
    "introduced features for improved performance."
)

TEMPLATE_SLOTS = ("{target}", "{feature description}", "{incremental features}")

# constructor telemetry used by dependency-hygiene tests
construction_counts = {"provider": 0, "adapter": 0, "base_encoder": 0}


def reset_construction_counts() -> None:
    for k in construction_counts:
        construction_counts[k] = 0


class TemplateError(ValueError):
    pass


class CacheMissError(KeyError):
    pass


class CacheFormatError(ValueError):
    pass


def validate_template(template: str) -> None:
    for slot in TEMPLATE_SLOTS:
        if template.count(slot) != 1:
            raise TemplateError(f"template must contain {slot} exactly once")


def render_prompt(template: str, scenario: IncrementalScenario) -> str:
    """Fill the dataset-level slots; deterministic for a given scenario."""
    validate_template(template)
    originals = ", ".join(c.name for c in scenario.original_columns)
    incrementals = ", ".join(c.name for c in scenario.incremental_columns) or "none"
    text = template.replace("{target}", scenario.target_column.name)
    text = text.replace("{feature description}", originals)
    return text.replace("{incremental features}", incrementals)


def prompt_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class HashEmbeddingProvider:
    """Deterministic stand-in for a language-model encoder: bag-of-token
    hashed projection, unit-normalized. Same text, same vector, any machine."""

    def __init__(self, dim: int = 64, seed: int = 0):
        if dim < 8:
            raise ValueError("embedding dim must be >= 8")
        self.dim = dim
        self.seed = seed
        construction_counts["provider"] += 1

    def _token_vector(self, token: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self.seed}:{token}".encode("utf-8")).digest()
        gen = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return gen.standard_normal(self.dim)

    def embed(self, text: str) -> np.ndarray:
        tokens = [t for t in "".join(
            c.lower() if c.isalnum() else " " for c in text).split() if t]
        if not tokens:
            tokens = ["<empty>"]
        vec = np.zeros(self.dim)
        for tok in tokens:
            vec += self._token_vector(tok)
        return vec / np.linalg.norm(vec)


class FileEmbeddingProvider:
    """Reads the JSON-Lines embedding cache written offline; keys are
    SHA-256 digests of the prompt text. Missing keys are a hard error."""

    def __init__(self, path: str):
        construction_counts["provider"] += 1
        self.path = path
        self._vectors: dict[str, np.ndarray] = {}
        self.dim = None
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as e:
                    raise CacheFormatError(f"{path}: line {line_no}: invalid JSON: {e}")
                try:
                    key, dim, vector = rec["key"], rec["dim"], rec["vector"]
                except KeyError as e:
                    raise CacheFormatError(f"{path}: line {line_no}: missing field {e}")
                vec = np.asarray(vector, dtype=np.float64)
                if vec.ndim != 1 or vec.shape[0] != dim:
                    raise CacheFormatError(
                        f"{path}: line {line_no}: vector length {vec.shape} != dim {dim}")
                if self.dim is None:
                    self.dim = dim
                elif dim != self.dim:
                    raise CacheFormatError(
                        f"{path}: line {line_no}: dim {dim} != file dim {self.dim}")
                if not np.all(np.isfinite(vec)):
                    raise CacheFormatError(f"{path}: line {line_no}: non-finite values")
                self._vectors[key] = vec
        if not self._vectors:
            raise CacheFormatError(f"{path}: empty embedding cache")

    def embed(self, text: str) -> np.ndarray:
        key = prompt_key(text)
        if key not in self._vectors:
            raise CacheMissError(f"no cached embedding for key {key} "
                                 f"(text starts: {text[:40]!r})")
        return self._vectors[key].copy()


def zero_pad(batch: EncodedBatch, full_columns: Sequence) -> EncodedBatch:
    """Extend a training-view batch to full arity: appended slots carry a
    zero value / UNK category and their missing bit set."""
    n_full = len(full_columns)
    n_have = batch.n_features
    if n_full < n_have:
        raise ValueError(f"target arity {n_full} below row arity {n_have}")
    for j in range(n_have):
        if full_columns[j].name != batch.columns[j].name:
            raise ValueError("padded columns must extend the batch's columns in order")
    n = batch.n_rows
    pad = n_full - n_have
    numeric = np.concatenate([batch.numeric, np.zeros((n, pad))], axis=1)
    cat = np.concatenate([batch.cat, np.full((n, pad), UNK_INDEX, dtype=np.int64)], axis=1)
    missing = np.concatenate([batch.missing, np.ones((n, pad))], axis=1)
    return EncodedBatch(numeric, cat, missing, list(full_columns))


def unpad(batch: EncodedBatch, n_original: int) -> EncodedBatch:
    return EncodedBatch(batch.numeric[:, :n_original], batch.cat[:, :n_original],
                        batch.missing[:, :n_original], batch.columns[:n_original])


@dataclass(frozen=True)
class BaseEncoderConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 4
    ff_mult: int = 2
    mask_rate: float = 0.3
    epochs: int = 25
    batch_size: int = 64
    lr: float = 1e-3
    min_columns: int = 2


def scalar_view(batch: EncodedBatch) -> np.ndarray:
    """One scalar per cell: the z-scored value, or a centered category index."""
    raw = batch.numeric.copy()
    for j, c in enumerate(batch.columns):
        if c.kind == "categorical":
            raw[:, j] = batch.cat[:, j].astype(np.float64) - 0.5
    raw[batch.missing > 0.5] = 0.0
    return raw


class BaseEncoder(Module):
    """Set-style encoder over per-cell tokens built from a value map shared
    across columns, so the column count is free to vary."""

    def __init__(self, config: BaseEncoderConfig, seed: int):
        super().__init__()
        construction_counts["base_encoder"] += 1
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xBA5E)))
        d = config.dim
        s = 1.0 / math.sqrt(d)
        self.config = config
        self.seed = seed
        self.value_w = self.param("value_w", nn.uniform_init(rng, (d,), s))
        self.value_b = self.param("value_b", nn.uniform_init(rng, (d,), s))
        self.missing_m = self.param("missing_m", nn.uniform_init(rng, (d,), s))
        self.mask_token = self.param("mask_token", nn.uniform_init(rng, (d,), s))
        self.cls = self.param("cls", nn.uniform_init(rng, (1, 1, d), s))
        self.blocks = [
            self.child(f"block{i}", TransformerBlock(d, config.heads, config.ff_mult, rng))
            for i in range(config.layers)
        ]
        self.final_norm = self.child("final_norm", nn.LayerNorm(d))
        self.recon_head = self.child("recon_head", Linear(d, 1, rng))
        self.pretrained = False

    def forward(self, values: np.ndarray, missing: np.ndarray,
                delta: dict | None = None,
                mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
        """Returns (pooled CLS vector, per-cell outputs)."""
        b, f = values.shape
        d = self.config.dim
        vals = T.reshape(Tensor(values), (b, f, 1))
        toks = T.add(T.add(T.mul(vals, self.value_w), self.value_b),
                     T.mul(T.reshape(Tensor(missing), (b, f, 1)), self.missing_m))
        if mask is not None:
            keep = (~mask).astype(np.float64)[:, :, None]
            toks = T.add(T.mul(toks, keep),
                         T.mul(Tensor(mask.astype(np.float64)[:, :, None]), self.mask_token))
        cls = T.add(self.cls, np.zeros((b, 1, d)))
        x = T.concat([cls, toks], axis=1)
        for block in self.blocks:
            x = block(x, delta=delta)
        x = self.final_norm(x)
        return x[:, 0, :], x[:, 1:, :]

    def encode(self, batch: EncodedBatch, delta: dict | None = None) -> Tensor:
        return self.forward(scalar_view(batch), batch.missing, delta=delta)[0]

    def reconstruction_loss(self, values: np.ndarray, missing: np.ndarray,
                            mask: np.ndarray) -> Tensor:
        """Squared error of predicted cell values at masked positions."""
        _, cells = self.forward(values, missing, mask=mask)
        pred = self.recon_head(cells)  # (b, f, 1)
        target = Tensor(values[:, :, None])
        sq = T.mul(T.sub(pred, target), T.sub(pred, target))
        weights = mask.astype(np.float64)[:, :, None]
        denom = max(float(weights.sum()), 1.0)
        return T.mul(T.sum_(T.mul(sq, weights)), 1.0 / denom)

    def attention_param_names(self) -> list[str]:
        return [f"block{i}.attn.{w}" for i in range(self.config.layers)
                for w in ("wq", "wk", "wv", "wo")]


def pretrain_base_encoder(scenario: IncrementalScenario,
                          config: BaseEncoderConfig = BaseEncoderConfig(),
                          seed: int = 0) -> tuple[BaseEncoder, list[dict]]:
    """Self-supervised pretraining on the scenario's training view under
    column-subset and column-shuffle augmentation; weights frozen at the end,
    and the frozen state is the anchor for later adaptation."""
    encoder = BaseEncoder(config, seed)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9E7)))
    batch = scenario.encode("train", "train")
    if batch.n_rows == 0:
        raise ValueError("empty pretraining corpus")
    values = scalar_view(batch)
    missing = batch.missing
    n, f = values.shape

    # fixed held-style evaluation mask so the training curve is comparable
    # across epochs (minibatch losses vary with the sampled column subsets)
    eval_rng = np.random.default_rng(np.random.SeedSequence((seed, 0xE7A1)))
    eval_rows = eval_rng.permutation(n)[:min(256, n)]
    eval_mask = eval_rng.random((len(eval_rows), f)) < config.mask_rate
    for r in range(eval_mask.shape[0]):
        if not eval_mask[r].any():
            eval_mask[r, eval_rng.integers(f)] = True
        if eval_mask[r].all():
            eval_mask[r, eval_rng.integers(f)] = False

    opt = Adam(encoder.trainable_parameters(), lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        encoder.set_training(True)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            cols = rng.permutation(f)[:rng.integers(min(config.min_columns, f), f + 1)]
            v = values[idx][:, cols]
            m = missing[idx][:, cols]
            mask = rng.random(v.shape) < config.mask_rate
            # keep at least one masked and one visible cell per row
            for r in range(mask.shape[0]):
                if not mask[r].any():
                    mask[r, rng.integers(mask.shape[1])] = True
                if mask[r].all():
                    mask[r, rng.integers(mask.shape[1])] = False
            opt.zero_grad()
            loss = encoder.reconstruction_loss(v, m, mask)
            backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        encoder.set_training(False)
        eval_loss = encoder.reconstruction_loss(values[eval_rows], missing[eval_rows],
                                                eval_mask).item()
        history.append({"epoch": epoch, "recon_loss": eval_loss,
                        "batch_loss": total / max(count, 1)})
    encoder.freeze()
    encoder.set_training(False)
    encoder.pretrained = True
    return encoder, history


@dataclass
class AdapterState:
    """Frozen base weights plus trainable low-rank factors per attention
    projection; the anchor is the frozen state itself."""
    base: BaseEncoder
    factors: dict[str, tuple[Parameter, Parameter]]  # name -> (A (out,r), B (in,r))
    rank: int
    ewc_lambda: float
    fisher: dict[str, np.ndarray]

    def trainable_parameters(self) -> list[Parameter]:
        out = []
        for a, b in self.factors.values():
            out.extend([a, b])
        return out


def init_adapter(base: BaseEncoder, rank: int = 4, ewc_lambda: float = 1.0,
                 fisher: dict[str, np.ndarray] | None = None,
                 seed: int = 0) -> AdapterState:
    if not base.pretrained:
        raise ValueError("base encoder must be pretrained before adaptation")
    construction_counts["adapter"] += 1
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xADA9)))
    params = base.named_parameters()
    factors = {}
    fisher_out = {}
    for name in base.attention_param_names():
        w = params[name]
        d_in, d_out = w.data.shape
        a = Parameter(rng.normal(scale=0.01, size=(d_out, rank)))
        b = Parameter(np.zeros((d_in, rank)))
        factors[name] = (a, b)
        if fisher is not None:
            if fisher[name].shape != w.data.shape:
                raise ValueError(f"fisher shape mismatch for {name}")
            fisher_out[name] = fisher[name]
        else:
            fisher_out[name] = np.ones_like(w.data)
    return AdapterState(base=base, factors=factors, rank=rank,
                        ewc_lambda=ewc_lambda, fisher=fisher_out)


def adapter_delta(adapter: AdapterState) -> dict[str, Tensor]:
    """Low-rank offsets in the projections' (in, out) layout."""
    out = {}
    for name, (a, b) in adapter.factors.items():
        out[name] = T.matmul(b, T.transpose(a))
    return out


def _block_delta(adapter: AdapterState, deltas: dict[str, Tensor], block_idx: int) -> dict:
    prefix = f"block{block_idx}.attn."
    return {name[len(prefix):]: d for name, d in deltas.items() if name.startswith(prefix)}


def adapter_forward(adapter: AdapterState, batch: EncodedBatch) -> Tensor:
    """Pooled output of the frozen base with every adapted projection
    replaced by W0 + A*B^T."""
    deltas = adapter_delta(adapter)
    values = scalar_view(batch)
    b, f = values.shape
    d = adapter.base.config.dim
    enc = adapter.base
    vals = T.reshape(Tensor(values), (b, f, 1))
    toks = T.add(T.add(T.mul(vals, enc.value_w), enc.value_b),
                 T.mul(T.reshape(Tensor(batch.missing), (b, f, 1)), enc.missing_m))
    cls = T.add(enc.cls, np.zeros((b, 1, d)))
    x = T.concat([cls, toks], axis=1)
    for i, block in enumerate(enc.blocks):
        x = block(x, delta=_block_delta(adapter, deltas, i))
    x = enc.final_norm(x)
    return x[:, 0, :]


def ewc_loss(adapter: AdapterState) -> Tensor:
    """Fisher-weighted quadratic anchor: sum_i (lambda/2) F_i (theta_i - theta*_i)^2,
    where the only deviation from the anchor is the low-rank offset."""
    total = Tensor(0.0)
    for name, (a, b) in adapter.factors.items():
        delta = T.matmul(b, T.transpose(a))
        f = adapter.fisher[name]
        total = T.add(total, T.sum_(T.mul(T.mul(delta, delta), f)))
    return T.mul(total, adapter.ewc_lambda / 2.0)


def estimate_fisher_diagonal(log_prob: Callable[[int], Tensor],
                             params: dict[str, Parameter],
                             n_samples: int) -> dict[str, np.ndarray]:
    """Empirical Fisher diagonal: mean over samples of the squared gradient
    of the per-sample log-likelihood."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    fisher = {name: np.zeros_like(p.data) for name, p in params.items()}
    for i in range(n_samples):
        for p in params.values():
            p.grad = None
        backward(log_prob(i))
        for name, p in params.items():
            if p.grad is not None:
                fisher[name] += p.grad ** 2
    return {name: f / n_samples for name, f in fisher.items()}


def reconstruction_fisher(base: BaseEncoder, scenario: IncrementalScenario,
                          n_samples: int = 64, mask_rate: float = 0.3,
                          seed: int = 0) -> dict[str, np.ndarray]:
    """Fisher of the attention projections under the pretraining objective
    (Gaussian reconstruction log-likelihood of masked cells)."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xF15)))
    batch = scenario.encode("train", "train")
    values = scalar_view(batch)
    missing = batch.missing
    n = min(n_samples, values.shape[0])
    rows = rng.permutation(values.shape[0])[:n]
    masks = rng.random((n, values.shape[1])) < mask_rate
    for r in range(n):
        if not masks[r].any():
            masks[r, rng.integers(values.shape[1])] = True
        if masks[r].all():
            masks[r, rng.integers(values.shape[1])] = False

    names = base.attention_param_names()
    params = {name: base.named_parameters()[name] for name in names}
    # gradients flow only while requires_grad is set; restore the frozen
    # state afterwards so the anchor stays immutable
    for p in params.values():
        p.requires_grad = True

    def log_prob(i: int) -> Tensor:
        row = rows[i:i + 1]
        loss = base.reconstruction_loss(values[row], missing[row], masks[i:i + 1])
        return T.mul(loss, -0.5)

    try:
        fisher = estimate_fisher_diagonal(log_prob, params, n)
    finally:
        for p in params.values():
            p.requires_grad = False
            p.grad = None
    return fisher


def assemble(t: Tensor, p: Tensor | None, l: Tensor | None) -> Tensor:
    """Order-fixed concatenation [t; p; l] of whichever paths are present."""
    parts = [t]
    if p is not None:
        parts.append(p)
    if l is not None:
        parts.append(l)
    return T.concat(parts, axis=1)
