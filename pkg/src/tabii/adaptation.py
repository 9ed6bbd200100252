"""Unified adaptation: padded labeled rows + pseudo-labeled inference rows,
optimized with cross-entropy, a two-view contrastive term and the Fisher
anchor, over the three-path representation and condensation blocks.

Only the incremental-column tokenizer, the low-rank factors, the text
projection, the condensation stack and the head train; the original model
and the pretrained base encoder stay frozen.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from . import tensor as T
from .data import EncodedBatch, IncrementalScenario, UNK_INDEX
from .encoder import FeatureTokenizer, OriginalModel, _original_slice
from .isc import ISCConfig, ISCStack
from .nn import Linear, Module, cross_entropy
from .placeholders import (AdapterState, BaseEncoder, BaseEncoderConfig,
                           DEFAULT_PROMPT_TEMPLATE, adapter_forward, assemble,
                           ewc_loss, init_adapter, pretrain_base_encoder,
                           reconstruction_fisher, render_prompt, zero_pad)
from .tensor import Adam, Tensor, backward


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AdaptationConfig:
    tau: float = 0.2
    alpha: float = 0.5
    pseudo_lambda: float = 0.3
    ewc_lambda: float = 1.0
    mask_rate: float = 0.3
    epochs: int = 30
    batch_size: int = 32
    mix: float = 1.0              # pseudo rows per train row in a batch
    lr: float = 1e-3
    seed: int = 0
    reference_size: int = 64
    confidence_threshold: float | None = None
    confidence_weighting: bool = True
    use_train_rows: bool = True
    use_text: bool = True
    use_adapter: bool = True
    use_isc: bool = True
    row_attention: str = "inference"  # "all" replaces IISA with plain row MSA
    contrastive_on: str = "pre_isc"   # which layer feeds the two-view loss
    segment_dropout: float = 0.0      # drop whole representation segments
    backbone_dropout: bool = False    # keep the frozen path's dropout live
    segment_dim: int = 32
    isc_depth: int = 2
    isc_heads: int = 4
    text_dim: int = 64
    adapter_rank: int = 4
    base_config: BaseEncoderConfig = field(default_factory=BaseEncoderConfig)

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError("tau must be positive")
        if not 0.0 <= self.mask_rate < 1.0:
            raise ConfigurationError("mask_rate must be in [0,1)")
        if self.alpha < 0 or self.pseudo_lambda < 0:
            raise ConfigurationError("alpha and pseudo_lambda must be >= 0")


@dataclass
class PseudoLabelSet:
    """Original-model predictions on the unlabeled inference pool."""
    row_indices: np.ndarray
    labels: np.ndarray
    confidence: np.ndarray

    def __len__(self):
        return len(self.row_indices)


def masked_view(batch: EncodedBatch, mask_rate: float,
                rng: np.random.Generator) -> EncodedBatch:
    """Zero out random feature slots (numeric -> 0, categorical -> UNK);
    rows that would lose every slot are re-drawn."""
    if not 0.0 <= mask_rate < 1.0:
        raise ValueError("mask_rate must be in [0,1)")
    out = batch.copy()
    if mask_rate == 0.0:
        return out
    n, f = batch.numeric.shape
    mask = rng.random((n, f)) < mask_rate
    degenerate = mask.all(axis=1)
    while degenerate.any():
        mask[degenerate] = rng.random((int(degenerate.sum()), f)) < mask_rate
        degenerate = mask.all(axis=1)
    out.numeric[mask] = 0.0
    out.cat[mask] = UNK_INDEX
    return out


def contrastive_loss(h: Tensor, h_tilde: Tensor, tau: float) -> Tensor:
    """Two-view agreement: for each row, its masked twin is the positive
    against every other masked row in the batch; cosine similarity."""
    if h.shape != h_tilde.shape:
        raise ValueError("views must share a shape")
    n = h.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    for name, v in (("h", h), ("h_tilde", h_tilde)):
        norms = np.linalg.norm(v.data, axis=1)
        if np.any(norms == 0.0):
            raise ValueError(f"zero-norm embedding in {name}")

    def unit(x: Tensor) -> Tensor:
        sq = T.sum_(T.mul(x, x), axis=1, keepdims=True)
        return T.mul(x, T.power(sq, -0.5))

    sims = T.matmul(unit(h), T.transpose(unit(h_tilde)))
    return cross_entropy(T.mul(sims, 1.0 / tau), np.arange(n))


def generate_pseudo_labels(original: OriginalModel, scenario: IncrementalScenario,
                           confidence_threshold: float | None = None) -> PseudoLabelSet:
    """Argmax labels and confidences of the original model over the
    original-column projection of the unlabeled inference pool."""
    if not original.trained:
        raise ValueError("original model is untrained")
    rows = np.concatenate([scenario.split.train_from_test,
                           scenario.split.val_from_test])
    batch = scenario.encode_rows(rows, "train")
    _, probs = original.predict(batch)
    labels = probs.argmax(axis=1)
    confidence = probs.max(axis=1)
    keep = np.ones(len(rows), dtype=bool)
    if confidence_threshold is not None:
        keep = confidence >= confidence_threshold
    return PseudoLabelSet(rows[keep], labels[keep], confidence[keep])


class AdaptedModel(Module):
    """The inference-time model: frozen original backbone fed full-arity
    tokens, optional adapter/text segments, condensation stack, fresh head."""

    def __init__(self, original: OriginalModel, scenario: IncrementalScenario,
                 config: AdaptationConfig,
                 adapter: AdapterState | None,
                 text_vector: np.ndarray | None,
                 seed: int):
        super().__init__()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xADAF)))
        self.config = config
        self.scenario_columns = scenario.feature_columns("inference")
        self.n_original = len(scenario.feature_columns("train"))
        self.original = original  # frozen copy; not a child (kept out of optimizer)
        self.original.freeze()
        self.original.set_training(False)
        self._rng = rng

        incr_cols = scenario.incremental_columns
        if incr_cols:
            n_cat = {c.name: scenario.stats_for(c).n_categories for c in incr_cols}
            self.incr_tokenizer = self.child("incr_tokenizer", FeatureTokenizer(
                incr_cols, n_cat, original.config.embed_dim, rng, inert=True))
        else:
            self.incr_tokenizer = None

        self.adapter = adapter
        self.text_vector = text_vector
        segments = 1
        if adapter is not None:
            segments += 1
        if text_vector is not None:
            segments += 1
            self.text_proj = self.child("text_proj", Linear(
                len(text_vector), config.segment_dim, rng))

        if original.config.embed_dim != config.segment_dim:
            raise ConfigurationError("segment_dim must match the backbone width")
        if adapter is not None and adapter.base.config.dim != config.segment_dim:
            raise ConfigurationError("segment_dim must match the base encoder width")

        self.isc_config = ISCConfig(segment_dim=config.segment_dim, segments=segments,
                                    heads=config.isc_heads, depth=config.isc_depth,
                                    key_dim=config.segment_dim)
        self.use_isc = config.use_isc
        if config.use_isc:
            self.isc = self.child("isc", ISCStack(self.isc_config, rng))
        self.head = self.child("head", Linear(self.isc_config.width,
                                              original.n_classes, rng))
        self.reference_batch: EncodedBatch | None = None
        self.trained = False
        self.sees_incremental = True

    def trainable_parameters(self):
        params = super().trainable_parameters()
        if self.adapter is not None:
            params.extend(self.adapter.trainable_parameters())
        return params

    def _segments(self, batch: EncodedBatch) -> Tensor:
        extra = None
        if self.incr_tokenizer is not None and batch.n_features > self.n_original:
            incr = EncodedBatch(batch.numeric[:, self.n_original:],
                                batch.cat[:, self.n_original:],
                                batch.missing[:, self.n_original:],
                                batch.columns[self.n_original:])
            extra = self.incr_tokenizer(incr)
        if self.training and self.config.backbone_dropout:
            self.original.set_training(True)
            t = self.original.cls_vector(batch, extra_tokens=extra)
            self.original.set_training(False)
        else:
            t = self.original.cls_vector(batch, extra_tokens=extra)
        p = adapter_forward(self.adapter, batch) if self.adapter is not None else None
        l = None
        if self.text_vector is not None:
            tiled = np.broadcast_to(self.text_vector, (batch.n_rows, len(self.text_vector)))
            l = self.text_proj(Tensor(tiled.copy()))
        r = assemble(t, p, l)
        rate = self.config.segment_dropout
        if self.training and rate > 0.0:
            # drop whole segments per row so no single path can carry the fit;
            # rows keep at least one segment (redraw degenerate full drops)
            keep = self._rng.random((batch.n_rows, self.isc_config.segments)) >= rate
            dead = ~keep.any(axis=1)
            while dead.any():
                keep[dead] = self._rng.random((int(dead.sum()),
                                               self.isc_config.segments)) >= rate
                dead = ~keep.any(axis=1)
            keep = np.repeat(keep, self.config.segment_dim, axis=1) / (1.0 - rate)
            r = T.mul(r, keep)
        return r

    def forward_parts(self, batch: EncodedBatch,
                      inference_mask: np.ndarray) -> tuple[Tensor, Tensor]:
        r = self._segments(batch)
        z = self.isc(r, inference_mask, self.config.row_attention) if self.use_isc else r
        return r, z

    def representation(self, batch: EncodedBatch, inference_mask: np.ndarray) -> Tensor:
        return self.forward_parts(batch, inference_mask)[1]

    def logits(self, batch: EncodedBatch, inference_mask: np.ndarray) -> Tensor:
        return self.head(self.representation(batch, inference_mask))

    # -- evaluation ------------------------------------------------------
    def _with_reference(self, batch: EncodedBatch,
                        reference: EncodedBatch | None) -> tuple[EncodedBatch, np.ndarray, int]:
        ref = reference if reference is not None else self.reference_batch
        n = batch.n_rows
        if ref is None or not self.use_isc:
            return batch, np.zeros(n, dtype=bool), n
        merged = EncodedBatch(
            np.concatenate([batch.numeric, ref.numeric]),
            np.concatenate([batch.cat, ref.cat]),
            np.concatenate([batch.missing, ref.missing]),
            batch.columns)
        # scored rows are unmasked: each attends to itself plus the fixed
        # reference pool only, never to other scored rows
        mask = np.concatenate([np.zeros(n, dtype=bool),
                               np.ones(ref.n_rows, dtype=bool)])
        return merged, mask, n

    def predict(self, batch: EncodedBatch,
                reference: EncodedBatch | None = None) -> tuple[np.ndarray, np.ndarray]:
        self.set_training(False)
        merged, mask, n = self._with_reference(batch, reference)
        probs = T.softmax(self.logits(merged, mask), axis=1).data[:n]
        return probs.argmax(axis=1), probs

    def discard_predict(self, batch: EncodedBatch) -> tuple[np.ndarray, np.ndarray]:
        """Original-model predictions on the original-column projection:
        zero-padded rows collapse back to the pre-adaptation behavior."""
        return self.original.predict(_original_slice(batch, self.n_original))

    def representations(self, batch: EncodedBatch,
                        reference: EncodedBatch | None = None) -> np.ndarray:
        """Pre-head vectors for analysis probes."""
        self.set_training(False)
        merged, mask, n = self._with_reference(batch, reference)
        return self.representation(merged, mask).data[:n]


def _concat_batches(parts: list[EncodedBatch]) -> EncodedBatch:
    if len(parts) == 1:
        return parts[0]
    return EncodedBatch(
        np.concatenate([p.numeric for p in parts]),
        np.concatenate([p.cat for p in parts]),
        np.concatenate([p.missing for p in parts]),
        parts[0].columns)


def total_loss(model: AdaptedModel,
               train_batch: EncodedBatch | None, train_labels: np.ndarray | None,
               pseudo_batch: EncodedBatch | None, pseudo_labels: np.ndarray | None,
               config: AdaptationConfig,
               rng: np.random.Generator,
               reference_batch: EncodedBatch | None = None,
               pseudo_weights: np.ndarray | None = None) -> tuple[Tensor, dict]:
    """Combined objective on one mixed batch; returns (loss, weighted parts).

    When a reference batch is given, its rows join as attention keys only
    (the inference-set key pool of the row attention, matching how scoring
    batches are assembled); they carry no loss terms themselves.
    """
    n_train = train_batch.n_rows if train_batch is not None else 0
    n_pseudo = pseudo_batch.n_rows if pseudo_batch is not None else 0
    if n_train + n_pseudo == 0:
        raise ValueError("empty batch")
    parts_list = [b for b in (train_batch, pseudo_batch) if b is not None and b.n_rows]
    n_loss = n_train + n_pseudo
    n_ref = 0
    if reference_batch is not None and model.use_isc:
        parts_list.append(reference_batch)
        n_ref = reference_batch.n_rows
    merged = _concat_batches(parts_list)
    inference_mask = np.concatenate([np.zeros(n_loss, dtype=bool),
                                     np.ones(n_ref, dtype=bool)])

    r_all, z_all = model.forward_parts(merged, inference_mask)
    r, z = r_all[:n_loss, :], z_all[:n_loss, :]
    logits = model.head(z)

    parts: dict[str, float] = {}
    loss = Tensor(0.0)
    if n_train:
        ce_train = cross_entropy(logits[:n_train, :], train_labels)
        loss = T.add(loss, ce_train)
        parts["loss_ce_train"] = ce_train.item()
    else:
        parts["loss_ce_train"] = 0.0
    if n_pseudo and config.pseudo_lambda > 0:
        ce_pseudo = T.mul(cross_entropy(logits[n_train:, :], pseudo_labels,
                                        weights=pseudo_weights),
                          config.pseudo_lambda)
        loss = T.add(loss, ce_pseudo)
        parts["loss_ce_pseudo"] = ce_pseudo.item()
    else:
        parts["loss_ce_pseudo"] = 0.0
    if config.alpha > 0 and n_loss >= 2:
        twin = masked_view(merged.take(np.arange(n_loss)), config.mask_rate, rng)
        if config.contrastive_on == "pre_isc":
            contrast = contrastive_loss(r, model._segments(twin), config.tau)
        else:
            twin_all = _concat_batches(
                [twin] + ([reference_batch] if n_ref else []))
            contrast = contrastive_loss(
                z, model.forward_parts(twin_all, inference_mask)[1][:n_loss, :],
                config.tau)
        contrast = T.mul(contrast, config.alpha)
        loss = T.add(loss, contrast)
        parts["loss_contrastive"] = contrast.item()
    else:
        parts["loss_contrastive"] = 0.0
    if model.adapter is not None and model.adapter.ewc_lambda > 0:
        anchor = ewc_loss(model.adapter)
        loss = T.add(loss, anchor)
        parts["loss_ewc"] = anchor.item()
    else:
        parts["loss_ewc"] = 0.0
    parts["loss_total"] = loss.item()
    return loss, parts


def _clone_original(original: OriginalModel, scenario: IncrementalScenario) -> OriginalModel:
    clone = OriginalModel(scenario, original.config, original.seed)
    clone.load_state_arrays(original.state_arrays())
    clone.trained = original.trained
    return clone


def _adapter_arrays(model: AdaptedModel) -> dict:
    if model.adapter is None:
        return {}
    out = {}
    for name, (a, b) in model.adapter.factors.items():
        out[name + ".A"] = a.data.copy()
        out[name + ".B"] = b.data.copy()
    return out


def _load_adapter_arrays(model: AdaptedModel, arrays: dict) -> None:
    if model.adapter is None:
        return
    for name, (a, b) in model.adapter.factors.items():
        a.data = arrays[name + ".A"].copy()
        b.data = arrays[name + ".B"].copy()


def adapt(original: OriginalModel, scenario: IncrementalScenario,
          provider, config: AdaptationConfig,
          base: BaseEncoder | None = None,
          template: str = DEFAULT_PROMPT_TEMPLATE) -> tuple[AdaptedModel, list[dict]]:
    """Run the unified adaptation stage and return the adapted model plus a
    per-step training log. TestFromTest rows are never touched."""
    if not original.trained:
        raise ValueError("original model is untrained")
    seed = config.seed
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xADA)))

    pseudo = generate_pseudo_labels(original, scenario, config.confidence_threshold)
    if config.pseudo_lambda > 0 and len(pseudo) == 0:
        raise ConfigurationError("pseudo_lambda > 0 but the pseudo-label set is empty")

    adapter = None
    if config.use_adapter:
        if base is None:
            base, _ = pretrain_base_encoder(scenario, config.base_config, seed=seed)
        fisher = reconstruction_fisher(base, scenario, seed=seed)
        adapter = init_adapter(base, rank=config.adapter_rank,
                               ewc_lambda=config.ewc_lambda, fisher=fisher, seed=seed)

    text_vector = None
    if config.use_text:
        text_vector = np.asarray(provider.embed(render_prompt(template, scenario)),
                                 dtype=np.float64)

    frozen = _clone_original(original, scenario)
    model = AdaptedModel(frozen, scenario, config, adapter, text_vector, seed)

    full_cols = scenario.feature_columns("inference")
    train_batch, train_labels = None, None
    if config.use_train_rows:
        train_batch = zero_pad(scenario.encode("train", "train"), full_cols)
        train_labels = scenario.labels("train")
    pseudo_batch = scenario.encode_rows(pseudo.row_indices, "inference")

    ref_size = min(config.reference_size, pseudo_batch.n_rows)
    ref_rows = rng.permutation(pseudo_batch.n_rows)[:ref_size]
    model.reference_batch = pseudo_batch.take(ref_rows)

    # padded validation rows anchor model selection: the adapted model must
    # not trade away original-column accuracy (labels here are fair game).
    # In the no-training-data mode there are no labeled rows of any kind,
    # so the last epoch stands unselected.
    val_batch = val_labels = None
    if config.use_train_rows:
        val_batch = zero_pad(scenario.encode("val", "train"), full_cols)
        val_labels = scenario.labels("val")

    opt = Adam(model.trainable_parameters(), lr=config.lr)
    n_train = train_batch.n_rows if train_batch is not None else 0
    n_pseudo = pseudo_batch.n_rows
    pseudo_per_batch = max(2, int(round(config.batch_size * config.mix)))
    log: list[dict] = []
    val_trace: list[float] = []
    states: list[tuple] = []
    step = 0
    for epoch in range(config.epochs):
        model.set_training(True)
        if n_train:
            train_order = rng.permutation(n_train)
            n_steps = math.ceil(n_train / config.batch_size)
        else:
            train_order = np.array([], dtype=int)
            n_steps = math.ceil(n_pseudo / pseudo_per_batch)
        pseudo_order = rng.permutation(n_pseudo)
        p_cursor = 0
        for s in range(n_steps):
            tb, tl = None, None
            if n_train:
                idx = train_order[s * config.batch_size:(s + 1) * config.batch_size]
                if len(idx) < 2:
                    continue
                tb, tl = train_batch.take(idx), train_labels[idx]
            pb, pl, pw = None, None, None
            if n_pseudo and (config.pseudo_lambda > 0 or config.alpha > 0 or not n_train):
                if p_cursor + pseudo_per_batch > n_pseudo:
                    pseudo_order = rng.permutation(n_pseudo)
                    p_cursor = 0
                pidx = pseudo_order[p_cursor:p_cursor + pseudo_per_batch]
                p_cursor += pseudo_per_batch
                pb, pl = pseudo_batch.take(pidx), pseudo.labels[pidx]
                if config.confidence_weighting:
                    pw = pseudo.confidence[pidx]
            opt.zero_grad()
            loss, parts = total_loss(model, tb, tl, pb, pl, config, rng,
                                     reference_batch=model.reference_batch,
                                     pseudo_weights=pw)
            backward(loss)
            opt.step()
            parts.update({"epoch": epoch, "step": step})
            log.append(parts)
            step += 1
        if val_batch is not None:
            model.set_training(False)
            _, val_probs = model.predict(val_batch)
            val_acc = float((val_probs.argmax(axis=1) == val_labels).mean())
            val_trace.append(val_acc)
            states.append((model.state_arrays(), _adapter_arrays(model)))
            log.append({"epoch": epoch, "step": step, "val_acc_padded": val_acc})
    if states:
        # keep the latest epoch whose padded-val accuracy is near the best:
        # guards original-column quality while late epochs carry the
        # incremental-aware features
        best = max(val_trace)
        keep = max(i for i, v in enumerate(val_trace) if v >= best - 0.005)
        model.load_state_arrays(states[keep][0])
        _load_adapter_arrays(model, states[keep][1])
    model.set_training(False)
    model.trained = True
    return model, log


def predict(model: AdaptedModel, batch: EncodedBatch,
            reference: EncodedBatch | None = None) -> tuple[np.ndarray, np.ndarray]:
    return model.predict(batch, reference)
