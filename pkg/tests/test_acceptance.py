"""Acceptance gate: every criterion at its stated tolerance, one printed
PASS/FAIL line per criterion (run with -s to see them live).

The heavy fixtures are session-scoped and shared: the informative-scenario
models feed the ordering, MI, ablation and hygiene criteria; the null
scenario feeds the no-fabricated-gains guard. All runs use fixed seeds and
the built-in synthetic generator, so the suite is deterministic end to end.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from tabii import nn
from tabii import tensor as T
from tabii.adaptation import (AdaptationConfig, adapt, contrastive_loss,
                              generate_pseudo_labels, total_loss)
from tabii.data import SplitSpec, make_scenario
from tabii.encoder import (BackboneConfig, TrainSettings, train_direct,
                           train_original)
from tabii.gradcheck import max_relative_error
from tabii.harness import ExperimentConfig, ablation_config, run
from tabii.isc import ISCBlock, ISCConfig, iisa_attention
from tabii.mine import PROBE_CONFIG, StatisticsNetConfig, mine_estimate, probe_model
from tabii.nn import Linear, MLP, TransformerBlock, cross_entropy
from tabii.placeholders import (BaseEncoderConfig, HashEmbeddingProvider,
                                adapter_forward, ewc_loss, init_adapter,
                                pretrain_base_encoder, zero_pad)
from tabii.synth import incremental_table, incremental_column_names
from tabii.tensor import Parameter, Tensor, backward

# ---------------------------------------------------------------------------
# fixed acceptance configuration (calibrated once; deterministic thereafter)

N_ROWS = 3000
N_SEEDS = 4
SUBSPLIT = (0.3, 0.2, 0.5)
TRAIN = TrainSettings(epochs=100, patience=10)
BACKBONE = BackboneConfig()


def adapt_config(seed: int, **kw) -> AdaptationConfig:
    base = dict(epochs=8, batch_size=128, confidence_threshold=0.7, seed=seed)
    base.update(kw)
    return AdaptationConfig(**base)


def split_for(seed: int) -> SplitSpec:
    return SplitSpec(seed=seed, test_subsplit=SUBSPLIT)


def report(criterion: int, label: str, ok: bool, detail: str = ""):
    status = "PASS" if ok else "FAIL"
    print(f"\n[ACCEPTANCE] criterion {criterion} ({label}): {status}  {detail}")
    assert ok, f"criterion {criterion} ({label}) failed: {detail}"


def _score(model, scenario, view):
    scenario.begin_scoring()
    batch = scenario.encode("test_from_test", view)
    labels = scenario.labels("test_from_test")
    _, probs = model.predict(batch)
    return nn.accuracy(probs, labels)


# ---------------------------------------------------------------------------
# shared expensive fixtures


@pytest.fixture(scope="session")
def informative_runs():
    """Discard/direct/optimal/tabii on the informative scenario, 4 seeds.
    Elapsed time covers exactly the criterion-5 workload."""
    t0 = time.time()
    runs = []
    for seed in range(N_SEEDS):
        table = incremental_table(n=N_ROWS, seed=100 + seed)
        scen = make_scenario(table, incremental_column_names(table), split_for(seed))
        original = train_original(scen, BACKBONE, TRAIN, seed=seed)
        direct = train_direct(scen, BACKBONE, TRAIN, seed=seed)
        scen_full = make_scenario(table, [], split_for(seed))
        optimal = train_original(scen_full, BACKBONE, TRAIN, seed=seed)
        base, _ = pretrain_base_encoder(scen, seed=seed)
        tabii_model, _ = adapt(original, scen, HashEmbeddingProvider(64, 0),
                               adapt_config(seed), base=base)
        runs.append({
            "seed": seed, "table": table, "scenario": scen,
            "scenario_full": scen_full, "original": original, "direct": direct,
            "optimal": optimal, "base": base, "tabii": tabii_model,
            "acc_discard": _score(original, scen, "train"),
            "acc_direct": _score(direct, scen, "inference"),
            "acc_optimal": _score(optimal, scen_full, "train"),
            "acc_tabii": _score(tabii_model, scen, "inference"),
        })
    return {"runs": runs, "elapsed": time.time() - t0}


@pytest.fixture(scope="session")
def null_runs():
    """Discard vs tabii on the constant-increment scenario, 4 seeds."""
    runs = []
    for seed in range(N_SEEDS):
        table = incremental_table(n=N_ROWS, seed=100 + seed, mode="null")
        scen = make_scenario(table, incremental_column_names(table), split_for(seed))
        original = train_original(scen, BACKBONE, TRAIN, seed=seed)
        tabii_model, _ = adapt(original, scen, HashEmbeddingProvider(64, 0),
                               adapt_config(seed))
        runs.append({"acc_discard": _score(original, scen, "train"),
                     "acc_tabii": _score(tabii_model, scen, "inference")})
    return runs


@pytest.fixture(scope="session")
def ablation_runs(informative_runs):
    """Single-component ablations on the informative scenario, 4 seeds."""
    flags = ("placeholder", "llm_encoder", "tab_adapter", "isc")
    accs = {flag: [] for flag in flags}
    for entry in informative_runs["runs"]:
        seed = entry["seed"]
        for flag in flags:
            cfg = ablation_config(adapt_config(seed), flag)
            base = entry["base"] if cfg.use_adapter else None
            model, _ = adapt(entry["original"], entry["scenario"],
                             HashEmbeddingProvider(64, 0), cfg, base=base)
            accs[flag].append(_score(model, entry["scenario"], "inference"))
    return accs


# ---------------------------------------------------------------------------
# criterion 1: gradient suite


class TestCriterion1:
    def test_gradient_suite(self):
        t0 = time.time()
        rng = np.random.default_rng(0)
        worst = {}

        x = Parameter(rng.normal(size=(5, 5)))
        y = Parameter(rng.normal(size=(5, 5)))
        op_losses = {
            "matmul": lambda: T.sum_(T.matmul(x, y)),
            "add": lambda: T.sum_(T.mul(T.add(x, y), 0.7)),
            "tanh": lambda: T.sum_(T.tanh(x)),
            "relu": lambda: T.sum_(T.mul(T.relu(x), 1.3)),
            "gelu": lambda: T.sum_(T.gelu(x)),
            "softmax": lambda: T.sum_(T.mul(T.softmax(x, axis=1), y.data)),
            "layer_norm": lambda: T.sum_(T.mul(T.layer_norm(x), y.data)),
            "concat": lambda: T.sum_(T.concat([x, T.mul(y, 2.0)], axis=1)),
            "mean": lambda: T.sum_(T.mean(T.mul(x, y), axis=0)),
        }
        for name, fn in op_losses.items():
            worst[name] = max_relative_error(fn, [x, y], h=1e-5)

        table = Parameter(rng.normal(size=(6, 4)))
        idx = np.array([0, 2, 2, 5])
        w = rng.normal(size=(4, 4))
        worst["embedding_lookup"] = max_relative_error(
            lambda: T.sum_(T.mul(T.embedding_lookup(table, idx), w)), [table], h=1e-5)

        xd = Parameter(rng.normal(size=(6, 6)))
        worst["dropout"] = max_relative_error(
            lambda: T.sum_(T.dropout(xd, 0.4, np.random.default_rng(3),
                                     training=True)), [xd], h=1e-5)

        # composite blocks
        block = TransformerBlock(8, 2, 2, np.random.default_rng(1)).set_training(False)
        xb = Tensor(rng.normal(size=(2, 3, 8)))
        worst["encoder_block"] = max_relative_error(
            lambda: T.sum_(block(xb)), block.parameters(), h=1e-5,
            sample_per_param=8, rng=np.random.default_rng(0))

        table2 = incremental_table(n=240, seed=3, n_incremental=4)
        scen = make_scenario(table2, incremental_column_names(table2),
                             SplitSpec(seed=3))
        base, _ = pretrain_base_encoder(
            scen, BaseEncoderConfig(dim=16, layers=1, heads=2, epochs=3), seed=0)
        adapter = init_adapter(base, rank=2, seed=0)
        for _, b in adapter.factors.values():
            b.data += 0.01
        batch = scen.encode("val", "inference").take(np.arange(3))
        worst["adapter"] = max_relative_error(
            lambda: T.sum_(adapter_forward(adapter, batch)),
            adapter.trainable_parameters()[:4], h=1e-5,
            sample_per_param=6, rng=np.random.default_rng(0))

        isc_block = ISCBlock(ISCConfig(segment_dim=4, segments=2, heads=2,
                                       depth=1, key_dim=4),
                             np.random.default_rng(2)).set_training(False)
        hb = Tensor(rng.normal(size=(3, 8)))
        mask = np.array([True, False, True])
        worst["isc_block"] = max_relative_error(
            lambda: T.sum_(isc_block(hb, mask)), isc_block.parameters(), h=1e-5,
            sample_per_param=6, rng=np.random.default_rng(0))

        net = MLP(6, [16, 16], 1, np.random.default_rng(4))
        xa = rng.normal(size=(8, 3))
        xbm = rng.normal(size=(8, 3))
        perm = np.random.default_rng(5).permutation(8)

        def mine_loss():
            joint = net(Tensor(np.concatenate([xa, xbm], axis=1)))
            marg = net(Tensor(np.concatenate([xa, xbm[perm]], axis=1)))
            return T.sub(T.mean(T.exp(T.clip(marg, -20, 20))),
                         T.mean(T.clip(joint, -20, 20)))

        worst["mine_net"] = max_relative_error(
            mine_loss, net.parameters(), h=1e-5,
            sample_per_param=8, rng=np.random.default_rng(0))

        original = train_original(scen, BackboneConfig(embed_dim=16, layers=1,
                                  heads=2), TrainSettings(epochs=4, patience=4),
                                  seed=0)
        cfg = adapt_config(0, epochs=1, batch_size=16, segment_dim=16,
                           isc_heads=2, isc_depth=1, reference_size=8,
                           base_config=BaseEncoderConfig(dim=16, layers=1,
                                                         heads=2, epochs=3))
        model, _ = adapt(original, scen, HashEmbeddingProvider(64, 0), cfg)
        model.set_training(False)
        tb = zero_pad(scen.encode("train", "train"),
                      scen.feature_columns("inference")).take(np.arange(5))
        tl = scen.labels("train")[:5]
        pseudo = generate_pseudo_labels(original, scen)
        pb = scen.encode_rows(pseudo.row_indices[:5], "inference")

        def total():
            value, _ = total_loss(model, tb, tl, pb, pseudo.labels[:5], cfg,
                                  np.random.default_rng(11))
            return value

        # a sampled ~20-entry parameter subset across the trainable groups
        params = model.trainable_parameters()[:5]
        worst["total_loss"] = max_relative_error(
            total, params, h=1e-5, sample_per_param=4,
            rng=np.random.default_rng(0))

        elapsed = time.time() - t0
        bad = {k: v for k, v in worst.items() if v > 1e-4}
        ok = not bad and elapsed < 120
        report(1, "gradient suite", ok,
               f"max_err={max(worst.values()):.2e} over {len(worst)} checks, "
               f"{elapsed:.0f}s (budget 120s)" + (f" violations={bad}" if bad else ""))


# ---------------------------------------------------------------------------
# criterion 2: row-attention oracle


class TestCriterion2:
    def test_iisa_oracle(self):
        q = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        k = np.array([[1.0, 2.0], [0.5, -0.5], [2.0, 0.0]])
        v = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
        mask = np.array([False, True, True])
        out, w = iisa_attention(Tensor(q), Tensor(k), Tensor(v), mask)

        expected = np.zeros((3, 2))
        for i in range(3):
            allowed = [j for j in range(3) if mask[j] or j == i]
            scores = np.array([q[i] @ k[j] / math.sqrt(2) for j in allowed])
            e = np.exp(scores - scores.max())
            soft = e / e.sum()
            expected[i] = sum(s * v[j] for s, j in zip(soft, allowed))
        hand_ok = np.abs(out.data - expected).max() <= 1e-10

        zero_ok = w.data[1, 0] == 0.0 and w.data[2, 0] == 0.0

        v_single = Tensor(np.array([[3.0, -1.0, 2.0]]))
        out_single, w_single = iisa_attention(Tensor(q[:1]), Tensor(k[:1]),
                                              v_single, np.array([False]))
        single_ok = (np.array_equal(out_single.data, v_single.data)
                     and w_single.data[0, 0] == 1.0)

        report(2, "row-attention oracle", hand_ok and zero_ok and single_ok,
               f"hand<=1e-10:{hand_ok} exact-zeros:{zero_ok} single-row:{single_ok}")


# ---------------------------------------------------------------------------
# criterion 3: loss identities


class TestCriterion3:
    def test_loss_identities(self):
        h = Tensor(np.tile(np.array([[0.3, -1.2, 2.0]]), (9, 1)))
        c_ok = abs(contrastive_loss(h, h, tau=0.2).item() - math.log(9)) <= 1e-12

        table = incremental_table(n=240, seed=3, n_incremental=4)
        scen = make_scenario(table, incremental_column_names(table), SplitSpec(seed=3))
        base, _ = pretrain_base_encoder(
            scen, BaseEncoderConfig(dim=16, layers=1, heads=2, epochs=3), seed=0)
        adapter = init_adapter(base, rank=2, ewc_lambda=1.5, seed=0)
        e_ok = ewc_loss(adapter).item() == 0.0

        original = train_original(scen, BackboneConfig(embed_dim=16, layers=1,
                                  heads=2), TrainSettings(epochs=4, patience=4),
                                  seed=0)
        cfg = adapt_config(0, epochs=1, batch_size=16, segment_dim=16,
                           isc_heads=2, isc_depth=1, reference_size=8,
                           base_config=BaseEncoderConfig(dim=16, layers=1,
                                                         heads=2, epochs=3))
        model, _ = adapt(original, scen, HashEmbeddingProvider(64, 0), cfg)
        model.set_training(False)
        tb = zero_pad(scen.encode("train", "train"),
                      scen.feature_columns("inference")).take(np.arange(8))
        tl = scen.labels("train")[:8]
        pseudo = generate_pseudo_labels(original, scen)
        pb = scen.encode_rows(pseudo.row_indices[:8], "inference")
        loss, parts = total_loss(model, tb, tl, pb, pseudo.labels[:8], cfg,
                                 np.random.default_rng(0))
        total = (parts["loss_ce_train"] + parts["loss_ce_pseudo"]
                 + parts["loss_contrastive"] + parts["loss_ewc"])
        b_ok = abs(loss.item() - total) <= 1e-10

        report(3, "loss identities", c_ok and e_ok and b_ok,
               f"contrastive=logN:{c_ok} ewc@anchor=0:{e_ok} breakdown-sums:{b_ok}")


# ---------------------------------------------------------------------------
# criterion 4: MI estimator calibration


class TestCriterion4:
    def test_mine_calibration(self):
        rng = np.random.default_rng(42)
        n = 5000

        t0 = time.time()
        a = rng.normal(size=(n, 1))
        b = rng.normal(size=(n, 1))
        est_ind = mine_estimate(a, b, StatisticsNetConfig(seed=0)).value
        t_ind = time.time() - t0
        ind_ok = -0.02 <= est_ind <= 0.05 and t_ind < 180

        t0 = time.time()
        rho = 0.9
        x = rng.normal(size=n)
        y = rho * x + math.sqrt(1 - rho * rho) * rng.normal(size=n)
        analytic = -0.5 * math.log(1 - rho * rho)
        est_dep = mine_estimate(x, y, StatisticsNetConfig(seed=0)).value
        t_dep = time.time() - t0
        dep_ok = abs(est_dep - analytic) <= 0.15 * analytic and t_dep < 180

        report(4, "MI estimator calibration", ind_ok and dep_ok,
               f"independent={est_ind:+.4f} (band [-0.02,0.05], {t_ind:.0f}s); "
               f"rho=0.9 -> {est_dep:.4f} vs {analytic:.4f} +-15% ({t_dep:.0f}s)")


# ---------------------------------------------------------------------------
# criterion 5: ordering + comparative performance


class TestCriterion5:
    def test_ordering_and_comparative(self, informative_runs):
        runs = informative_runs["runs"]
        elapsed = informative_runs["elapsed"]
        mean = {k: float(np.mean([r[f"acc_{k}"] for r in runs]))
                for k in ("discard", "direct", "optimal", "tabii")}
        comparative = float(np.mean([r["acc_tabii"] / r["acc_optimal"]
                                     for r in runs]))
        order_ok = mean["tabii"] > mean["discard"] > mean["direct"]
        comp_ok = comparative >= 0.95
        time_ok = elapsed < 900
        report(5, "ordering + comparative", order_ok and comp_ok and time_ok,
               f"tabii={mean['tabii']:.4f} > discard={mean['discard']:.4f} > "
               f"direct={mean['direct']:.4f}: {order_ok}; "
               f"comparative={comparative:.4f}>=0.95: {comp_ok}; "
               f"{elapsed:.0f}s (budget 900s)")


# ---------------------------------------------------------------------------
# criterion 6: null-information guard


class TestCriterion6:
    def test_null_guard(self, null_runs):
        tabii_mean = float(np.mean([r["acc_tabii"] for r in null_runs]))
        discard_mean = float(np.mean([r["acc_discard"] for r in null_runs]))
        gap = abs(tabii_mean - discard_mean)
        report(6, "null-information guard", gap <= 0.02,
               f"|{tabii_mean:.4f} - {discard_mean:.4f}| = {gap:.4f} <= 0.02")


# ---------------------------------------------------------------------------
# criterion 7: MI orderings


class TestCriterion7:
    def test_mi_orderings(self, informative_runs):
        zy_wins, xz_wins = 0, 0
        details = []
        for entry in informative_runs["runs"]:
            seed = entry["seed"]
            cfg = replace(PROBE_CONFIG, seed=seed)
            scen = entry["scenario"]
            t_zy = probe_model(entry["tabii"], scen, "I_ZY", cfg).value
            d_zy = probe_model(entry["direct"], scen, "I_ZY", cfg).value
            t_xz = probe_model(entry["tabii"], scen, "I_XZ", cfg).value
            d_xz = probe_model(entry["direct"], scen, "I_XZ", cfg).value
            zy_wins += t_zy > d_zy
            xz_wins += t_xz < d_xz
            details.append(f"s{seed}: ZY {t_zy:.2f}/{d_zy:.2f} "
                           f"XZ {t_xz:.2f}/{d_xz:.2f}")
        ok = zy_wins >= 3 and xz_wins >= 3
        report(7, "MI orderings", ok,
               f"I(Z;Y) tabii>direct {zy_wins}/4, I(X;Z) tabii<direct {xz_wins}/4; "
               + "; ".join(details))


# ---------------------------------------------------------------------------
# criterion 8: ablation trend


class TestCriterion8:
    def test_ablation_trend(self, informative_runs, ablation_runs):
        full = float(np.mean([r["acc_tabii"] for r in informative_runs["runs"]]))
        detail, ok = [], True
        for flag, accs in ablation_runs.items():
            mean_ab = float(np.mean(accs))
            ok = ok and full >= mean_ab
            detail.append(f"{flag}={mean_ab:.4f}")
        report(8, "ablation trend", ok,
               f"full={full:.4f} >= " + ", ".join(detail))


# ---------------------------------------------------------------------------
# criterion 9: stress trends


class TestCriterion9:
    N_STRESS_SEEDS = 2

    def _tabii_run(self, table, seed, **adapt_kw):
        scen = make_scenario(table, incremental_column_names(table), split_for(seed))
        original = train_original(scen, BACKBONE, TRAIN, seed=seed)
        model, _ = adapt(original, scen, HashEmbeddingProvider(64, 0),
                         adapt_config(seed, **adapt_kw))
        return _score(model, scen, "inference")

    def test_stress_trends(self, informative_runs):
        from tabii.data import inject_missing
        from tabii.harness import _blank_columns, _impute

        # (a) missing rate 0.5: native handling vs mean imputation
        native, imputed = [], []
        for seed in range(self.N_STRESS_SEEDS):
            table = incremental_table(n=N_ROWS, seed=100 + seed)
            degraded = inject_missing(table, 0.5, seed=seed)
            native.append(self._tabii_run(degraded, seed))
            imputed.append(self._tabii_run(_impute(degraded, seed, "mean", seed),
                                           seed))
        missing_ok = np.mean(native) > np.mean(imputed)

        # (b) doubled reserved placeholder slots stay within 0.03
        base_accs = [r["acc_tabii"] for r in informative_runs["runs"]
                     [:self.N_STRESS_SEEDS]]
        double = []
        for seed in range(self.N_STRESS_SEEDS):
            table = incremental_table(n=N_ROWS, seed=100 + seed)
            full_arity = 12
            stretched = _blank_columns(table, full_arity)  # x2 total width
            names = incremental_column_names(stretched) + [
                f"reserved_{i + 1}" for i in range(full_arity)]
            scen = make_scenario(stretched, names, split_for(seed))
            original = train_original(scen, BACKBONE, TRAIN, seed=seed)
            model, _ = adapt(original, scen, HashEmbeddingProvider(64, 0),
                             adapt_config(seed))
            double.append(_score(model, scen, "inference"))
        length_ok = np.mean(double) >= np.mean(base_accs) - 0.03

        # (c) adaptation without the labeled training rows keeps >=92%
        tso = []
        for seed in range(self.N_STRESS_SEEDS):
            table = incremental_table(n=N_ROWS, seed=100 + seed)
            tso.append(self._tabii_run(table, seed, use_train_rows=False))
        tso_ok = np.mean(tso) >= 0.92 * np.mean(base_accs)

        report(9, "stress trends", missing_ok and length_ok and tso_ok,
               f"missing0.5 {np.mean(native):.4f}>{np.mean(imputed):.4f}:{missing_ok}; "
               f"x2-slots {np.mean(double):.4f}>={np.mean(base_accs):.4f}-0.03:"
               f"{length_ok}; test-set-only {np.mean(tso):.4f}>="
               f"0.92*{np.mean(base_accs):.4f}:{tso_ok}")


# ---------------------------------------------------------------------------
# criterion 10: determinism & label hygiene


class TestCriterion10:
    def test_determinism_and_hygiene(self, informative_runs, tmp_path):
        from tabii.harness import write_result
        config = ExperimentConfig(
            synthetic="informative", synthetic_rows=420, seeds=1, method="tabii",
            out=str(tmp_path / "a"),
            backbone=BackboneConfig(embed_dim=16, layers=1, heads=2),
            train=TrainSettings(epochs=6, patience=3),
            adaptation=AdaptationConfig(
                epochs=2, batch_size=32, segment_dim=16, isc_heads=2,
                isc_depth=1, reference_size=16,
                base_config=BaseEncoderConfig(dim=16, layers=1, heads=2,
                                              epochs=3)))
        # identical config run twice: the rewritten result file must be
        # byte-identical (wall time lives in the .meta.json sidecar)
        p1 = write_result(config, run(config))
        raw1 = open(p1, "rb").read()
        p2 = write_result(config, run(config))
        raw2 = open(p2, "rb").read()
        deterministic = p1 == p2 and raw1 == raw2

        hygiene = True
        for entry in informative_runs["runs"]:
            for access in entry["scenario"].label_audit:
                if access.split in ("train_from_test", "val_from_test"):
                    hygiene = False
                if access.split == "test_from_test" and access.phase != "scoring":
                    hygiene = False
        report(10, "determinism & hygiene", deterministic and hygiene,
               f"byte-identical-results:{deterministic} label-audit-clean:{hygiene}")
