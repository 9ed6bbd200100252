"""Masked views, contrastive identities, pseudo-labels, loss assembly,
the unified adaptation loop and its hygiene."""

import math

import numpy as np
import pytest

from tabii import nn
from tabii import tensor as T
from tabii.adaptation import (AdaptationConfig, ConfigurationError,
                              contrastive_loss, generate_pseudo_labels,
                              masked_view, adapt, predict, total_loss)
from tabii.data import SplitSpec, make_scenario
from tabii.encoder import BackboneConfig, TrainSettings, train_original
from tabii.gradcheck import max_relative_error
from tabii.placeholders import HashEmbeddingProvider, zero_pad
from tabii.synth import incremental_table, incremental_column_names, separable_table
from tabii.tensor import Tensor

SMALL_BACKBONE = BackboneConfig(embed_dim=16, layers=1, heads=2, dropout=0.1)
FAST_TRAIN = TrainSettings(epochs=25, patience=8)


@pytest.fixture(scope="module")
def scenario():
    table = incremental_table(n=360, seed=21, n_incremental=4)
    return make_scenario(table, incremental_column_names(table), SplitSpec(seed=21))


@pytest.fixture(scope="module")
def original(scenario):
    return train_original(scenario, SMALL_BACKBONE, FAST_TRAIN, seed=0)


def small_config(**kw):
    from tabii.placeholders import BaseEncoderConfig
    base = dict(epochs=2, seed=0, batch_size=24, segment_dim=16,
                isc_heads=2, isc_depth=1, reference_size=16,
                base_config=BaseEncoderConfig(dim=16, layers=1, heads=2, epochs=5))
    base.update(kw)
    return AdaptationConfig(**base)


@pytest.fixture(scope="module")
def adapted(scenario, original):
    model, log = adapt(original, scenario, HashEmbeddingProvider(64, 0),
                       small_config(epochs=3))
    return model, log


class TestMaskedView:
    def _batch(self, n=100, f=10, seed=0):
        from tabii.data import ColumnSpec, EncodedBatch
        rng = np.random.default_rng(seed)
        cols = [ColumnSpec(f"c{j}", "numeric") for j in range(f)]
        return EncodedBatch(rng.normal(size=(n, f)),
                            np.zeros((n, f), dtype=np.int64),
                            np.zeros((n, f)), cols)

    def test_rate_zero_identity(self):
        batch = self._batch()
        out = masked_view(batch, 0.0, np.random.default_rng(0))
        assert np.array_equal(out.numeric, batch.numeric)

    def test_same_seed_same_mask(self):
        batch = self._batch()
        a = masked_view(batch, 0.4, np.random.default_rng(7))
        b = masked_view(batch, 0.4, np.random.default_rng(7))
        assert np.array_equal(a.numeric, b.numeric)

    def test_binomial_band(self):
        batch = self._batch(n=1000, f=10)
        out = masked_view(batch, 0.3, np.random.default_rng(3))
        zeroed = ((out.numeric == 0.0) & (batch.numeric != 0.0)).mean()
        assert 0.285 <= zeroed <= 0.315

    def test_no_row_fully_masked(self):
        batch = self._batch(n=400, f=3)
        out = masked_view(batch, 0.85, np.random.default_rng(5))
        surviving = (out.numeric != 0.0).sum(axis=1)
        assert (surviving >= 1).all()


class TestContrastiveLoss:
    def test_identical_embeddings_log_n(self):
        h = Tensor(np.tile(np.array([[1.0, 2.0, 3.0]]), (7, 1)))
        loss = contrastive_loss(h, h, tau=0.2)
        assert loss.item() == pytest.approx(math.log(7), abs=1e-12)

    def test_orthogonal_pair_hand_value(self):
        h = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
        loss = contrastive_loss(h, h, tau=1.0)
        expected = -math.log(math.e / (math.e + 1.0))
        assert loss.item() == pytest.approx(expected, abs=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            h = Tensor(rng.normal(size=(6, 4)))
            ht = Tensor(rng.normal(size=(6, 4)))
            assert contrastive_loss(h, ht, tau=0.5).item() >= 0.0

    def test_zero_norm_rejected(self):
        h = Tensor(np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="zero-norm"):
            contrastive_loss(h, h, tau=1.0)

    def test_batch_of_one_rejected(self):
        h = Tensor(np.ones((1, 3)))
        with pytest.raises(ValueError):
            contrastive_loss(h, h, tau=1.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(1)
        from tabii.nn import Linear
        lin = Linear(4, 4, rng)
        x = Tensor(rng.normal(size=(5, 4)))
        xt = Tensor(rng.normal(size=(5, 4)))

        def loss():
            return contrastive_loss(lin(x), lin(xt), tau=0.3)

        err = max_relative_error(loss, lin.parameters(), h=1e-5)
        assert err <= 1e-4


class TestPseudoLabels:
    def test_confidences_valid(self, original, scenario):
        pseudo = generate_pseudo_labels(original, scenario)
        assert len(pseudo) == len(scenario.split.train_from_test) + \
               len(scenario.split.val_from_test)
        assert np.all(pseudo.confidence > 0) and np.all(pseudo.confidence <= 1)

    def test_row_identical_to_train_row_gets_same_prediction(self, original, scenario):
        rows = scenario.split.train[:1]
        batch = scenario.encode_rows(rows, "train")
        labels_a, _ = original.predict(batch)
        labels_b, _ = original.predict(batch)
        assert labels_a[0] == labels_b[0]

    def test_separable_pseudo_accuracy(self):
        table = separable_table(n=500, seed=2)
        scen = make_scenario(table, [], SplitSpec(seed=2))
        model = train_original(scen, BackboneConfig(), TrainSettings(epochs=50,
                               patience=10), seed=0)
        pseudo = generate_pseudo_labels(model, scen)
        truth = np.concatenate([scen.hidden_truth("train_from_test"),
                                scen.hidden_truth("val_from_test")])
        assert (pseudo.labels == truth).mean() >= 0.9

    def test_untrained_model_rejected(self, scenario):
        from tabii.encoder import OriginalModel
        fresh = OriginalModel(scenario, SMALL_BACKBONE, seed=0)
        with pytest.raises(ValueError):
            generate_pseudo_labels(fresh, scenario)

    def test_threshold_filters(self, original, scenario):
        full = generate_pseudo_labels(original, scenario)
        strict = generate_pseudo_labels(original, scenario,
                                        confidence_threshold=0.99)
        assert len(strict) <= len(full)


class TestTotalLoss:
    def _model(self, scenario, original, **kw):
        model, _ = adapt(original, scenario, HashEmbeddingProvider(64, 0),
                         small_config(epochs=1, **kw))
        return model

    def test_switched_off_terms_leave_train_ce(self, scenario, original):
        config = small_config(alpha=0.0, pseudo_lambda=0.0, use_adapter=False,
                              use_text=False)
        model = self._model(scenario, original, alpha=0.0, pseudo_lambda=0.0,
                            use_adapter=False, use_text=False)
        batch = zero_pad(scenario.encode("train", "train"),
                         scenario.feature_columns("inference")).take(np.arange(8))
        labels = scenario.labels("train")[:8]
        loss, parts = total_loss(model, batch, labels, None, None, config,
                                 np.random.default_rng(0))
        assert parts["loss_ce_pseudo"] == 0.0
        assert parts["loss_contrastive"] == 0.0
        assert parts["loss_ewc"] == 0.0
        assert loss.item() == pytest.approx(parts["loss_ce_train"], abs=1e-12)

    def test_breakdown_sums_to_total(self, scenario, original, adapted):
        model, _ = adapted
        config = small_config(epochs=3)
        train_batch = zero_pad(scenario.encode("train", "train"),
                               scenario.feature_columns("inference")).take(np.arange(10))
        labels = scenario.labels("train")[:10]
        pseudo = generate_pseudo_labels(original, scenario)
        pseudo_batch = scenario.encode_rows(pseudo.row_indices[:10], "inference")
        model.set_training(False)
        loss, parts = total_loss(model, train_batch, labels, pseudo_batch,
                                 pseudo.labels[:10], config,
                                 np.random.default_rng(0))
        total = (parts["loss_ce_train"] + parts["loss_ce_pseudo"]
                 + parts["loss_contrastive"] + parts["loss_ewc"])
        assert loss.item() == pytest.approx(total, abs=1e-10)
        assert parts["loss_total"] == pytest.approx(total, abs=1e-10)

    def test_duplicated_pseudo_rows_leave_term_unchanged(self, scenario, original,
                                                         adapted):
        model, _ = adapted
        config = small_config(alpha=0.0)
        pseudo = generate_pseudo_labels(original, scenario)
        batch = scenario.encode_rows(pseudo.row_indices[:8], "inference")
        labels = pseudo.labels[:8]
        model.set_training(False)
        _, once = total_loss(model, None, None, batch, labels, config,
                             np.random.default_rng(0))
        doubled = batch.take(np.concatenate([np.arange(8), np.arange(8)]))
        _, twice = total_loss(model, None, None, doubled,
                              np.concatenate([labels, labels]), config,
                              np.random.default_rng(0))
        assert once["loss_ce_pseudo"] == pytest.approx(twice["loss_ce_pseudo"],
                                                       abs=1e-9)

    def test_gradcheck_on_parameter_subset(self, scenario, original):
        config = small_config(epochs=1, alpha=0.5, pseudo_lambda=0.3)
        model, _ = adapt(original, scenario, HashEmbeddingProvider(64, 0), config)
        model.set_training(False)
        train_batch = zero_pad(scenario.encode("train", "train"),
                               scenario.feature_columns("inference")).take(np.arange(6))
        labels = scenario.labels("train")[:6]
        pseudo = generate_pseudo_labels(original, scenario)
        pseudo_batch = scenario.encode_rows(pseudo.row_indices[:6], "inference")

        def loss():
            value, _ = total_loss(model, train_batch, labels, pseudo_batch,
                                  pseudo.labels[:6], config,
                                  np.random.default_rng(123))
            return value

        params = model.trainable_parameters()[:4]
        err = max_relative_error(loss, params, h=1e-5, sample_per_param=5,
                                 rng=np.random.default_rng(0))
        assert err <= 1e-4


class TestAdapt:
    def test_deterministic_per_seed(self, scenario, original):
        def run():
            model, _ = adapt(original, scenario, HashEmbeddingProvider(64, 0),
                             small_config(epochs=2))
            scenario.begin_scoring()
            batch = scenario.encode("test_from_test", "inference")
            _, probs = model.predict(batch)
            return probs

        a, b = run(), run()
        assert np.array_equal(a, b)

    def test_never_reads_test_labels(self, scenario, original):
        before = len(scenario.label_audit)
        adapt(original, scenario, HashEmbeddingProvider(64, 0), small_config())
        new = scenario.label_audit[before:]
        assert all(a.split in ("train", "val") for a in new)

    def test_empty_pseudo_with_lambda_errors(self, scenario, original):
        with pytest.raises(ConfigurationError):
            adapt(original, scenario, HashEmbeddingProvider(64, 0),
                  small_config(confidence_threshold=1.1))

    def test_test_set_only_mode_runs(self, scenario, original):
        model, _ = adapt(original, scenario, HashEmbeddingProvider(64, 0),
                         small_config(use_train_rows=False))
        scenario.begin_scoring()
        _, probs = model.predict(scenario.encode("test_from_test", "inference"))
        assert probs.shape[1] == scenario.n_classes

    def test_predict_repeatable_and_valid(self, scenario, adapted):
        model, _ = adapted
        scenario.begin_scoring()
        batch = scenario.encode("test_from_test", "inference")
        labels_a, probs_a = predict(model, batch)
        labels_b, probs_b = predict(model, batch)
        assert np.array_equal(labels_a, labels_b)
        assert np.array_equal(probs_a, probs_b)
        np.testing.assert_allclose(probs_a.sum(axis=1), 1.0, atol=1e-9)

    def test_training_log_has_all_components(self, adapted):
        _, log = adapted
        step_entries = [e for e in log if "loss_total" in e]
        assert step_entries
        expected = {"loss_total", "loss_ce_train", "loss_ce_pseudo",
                    "loss_contrastive", "loss_ewc", "epoch", "step"}
        assert expected <= set(step_entries[0])

    def test_discard_mode_padding_equivalence(self, scenario, original, adapted):
        model, _ = adapted
        batch = scenario.encode("val", "train")
        padded = zero_pad(batch, scenario.feature_columns("inference"))
        _, via_model = model.discard_predict(padded)
        _, via_original = original.predict(batch)
        np.testing.assert_allclose(via_model, via_original, atol=1e-12)

    def test_all_terms_off_reduces_to_supervised_finetuning(self, scenario, original):
        # alpha=0, lambda=0, no extra paths: plain supervised fine-tuning on
        # zero-padded rows; must stay within noise of the discard baseline
        model, _ = adapt(original, scenario, HashEmbeddingProvider(64, 0),
                         small_config(epochs=25, alpha=0.0, pseudo_lambda=0.0,
                                      use_adapter=False, use_text=False,
                                      use_isc=False))
        scenario.begin_scoring()
        labels = scenario.labels("test_from_test")
        _, probs = model.predict(scenario.encode("test_from_test", "inference"))
        _, dprobs = original.predict(scenario.encode("test_from_test", "train"))
        gap = abs(nn.accuracy(probs, labels) - nn.accuracy(dprobs, labels))
        assert gap <= 0.08  # small-sample noise band at this dataset size
