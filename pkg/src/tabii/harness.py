"""Experiment orchestration: train/score the method variants over seeded
scenarios, emit deterministic result files, and reproduce the protocol's
comparison tables (ablations, attribute tiers, stress suites, MI report,
cross-dataset ranking).
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .adaptation import AdaptationConfig, adapt, generate_pseudo_labels
from .data import (IncrementalScenario, SplitSpec, Table, inject_missing,
                   load_csv, make_scenario, randomize_column_names,
                   rank_attributes, MISSING, ColumnSpec)
from .encoder import (BackboneConfig, TrainSettings, train_direct,
                      train_original)
from .mine import PROBE_CONFIG, StatisticsNetConfig, probe_model
from .placeholders import (DEFAULT_PROMPT_TEMPLATE, FileEmbeddingProvider,
                           HashEmbeddingProvider, pretrain_base_encoder)
from .synth import incremental_table, incremental_column_names, separable_table
from .tensor import atomic_write_json

OUT_ROOT_ENV = "TABII_OUT"

METHODS = ("discard", "direct", "tabii", "optimal")


@dataclass(frozen=True)
class ExperimentConfig:
    data: str | None = None                 # CSV path; None -> synthetic
    schema: str | None = None
    target: str | None = None
    incremental: tuple = ()                 # column names; empty + synthetic -> extras
    synthetic: str | None = "informative"   # informative | null | noise | None
    synthetic_rows: int = 1800
    method: str = "tabii"
    seeds: int = 4
    seed0: int = 0
    out: str | None = None
    with_optimal: bool = False
    template: str = DEFAULT_PROMPT_TEMPLATE
    provider: str = "hash"                  # hash | file:<path>
    provider_dim: int = 64
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    mine: StatisticsNetConfig = field(default_factory=lambda: PROBE_CONFIG)
    split: SplitSpec = field(default_factory=SplitSpec)

    def method_known(self) -> bool:
        return self.method in METHODS or self.method.startswith("ablation:")


@dataclass
class RunResult:
    method: str
    per_seed: list
    mean: float
    std: float
    comparative: float | None
    wall_time_s: float
    manifests: list

    def to_dict(self, include_wall_time: bool = False) -> dict:
        out = {
            "method": self.method,
            "per_seed": self.per_seed,
            "mean": self.mean,
            "std": self.std,
            "comparative": self.comparative,
            "manifests": self.manifests,
        }
        if include_wall_time:
            out["wall_time_s"] = self.wall_time_s
        return out


def config_fingerprint(config: ExperimentConfig) -> str:
    payload = json.dumps(asdict(config), sort_keys=True, default=str)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def load_table(config: ExperimentConfig) -> Table:
    if config.data is not None:
        return load_csv(config.data, schema_path=config.schema, target=config.target)
    if config.synthetic is None:
        raise ValueError("either a data path or a synthetic mode is required")
    if config.synthetic == "separable":
        return separable_table(n=config.synthetic_rows, seed=100)
    return incremental_table(n=config.synthetic_rows, seed=100,
                             mode=config.synthetic)


def incremental_names(config: ExperimentConfig, table: Table) -> list[str]:
    if config.incremental:
        return list(config.incremental)
    if config.data is None:
        return incremental_column_names(table)
    raise ValueError("incremental column names are required for CSV data")


def make_provider(config: ExperimentConfig):
    if config.provider == "hash":
        return HashEmbeddingProvider(config.provider_dim, seed=0)
    if config.provider.startswith("file:"):
        return FileEmbeddingProvider(config.provider[len("file:"):])
    raise ValueError(f"unknown provider {config.provider!r}")


def scenario_for_seed(config: ExperimentConfig, table: Table,
                      seed: int, incremental: list[str] | None = None) -> IncrementalScenario:
    names = incremental if incremental is not None else incremental_names(config, table)
    return make_scenario(table, names, replace(config.split, seed=seed))


def _score(model, scenario: IncrementalScenario, view: str) -> float:
    scenario.begin_scoring()
    batch = scenario.encode("test_from_test", view)
    labels = scenario.labels("test_from_test")
    _, probs = model.predict(batch)
    return nn.accuracy(probs, labels)


def fit_and_score(method: str, config: ExperimentConfig, table: Table,
                  seed: int, incremental: list[str] | None = None,
                  return_model: bool = False):
    """Train one method on one seeded scenario and score TestFromTest."""
    scenario = scenario_for_seed(config, table, seed, incremental)
    adapt_cfg = replace(config.adaptation, seed=seed)
    if method == "discard":
        model = train_original(scenario, config.backbone, config.train, seed=seed)
        acc = _score(model, scenario, "train")
    elif method == "direct":
        model = train_direct(scenario, config.backbone, config.train, seed=seed)
        acc = _score(model, scenario, "inference")
    elif method == "optimal":
        full = scenario_for_seed(config, table, seed, incremental=[])
        model = train_original(full, config.backbone, config.train, seed=seed)
        acc = _score(model, full, "train")
        scenario = full
    elif method == "tabii" or method.startswith("ablation:"):
        if method.startswith("ablation:"):
            adapt_cfg = ablation_config(adapt_cfg, method.split(":", 1)[1])
        original = train_original(scenario, config.backbone, config.train, seed=seed)
        model, _ = adapt(original, scenario, make_provider(config), adapt_cfg,
                         template=config.template)
        acc = _score(model, scenario, "inference")
    else:
        raise ValueError(f"unknown method {method!r}")
    if return_model:
        return acc, model, scenario
    return acc, None, scenario


ABLATION_FLAGS = ("placeholder", "llm_encoder", "tab_adapter", "isc", "all")


def ablation_config(base: AdaptationConfig, drop: str) -> AdaptationConfig:
    """Config surgery per ablation flag."""
    if drop == "placeholder":
        return replace(base, use_text=False, use_adapter=False)
    if drop == "llm_encoder":
        return replace(base, use_text=False)
    if drop == "tab_adapter":
        return replace(base, use_adapter=False)
    if drop == "isc":
        return replace(base, row_attention="all")
    if drop == "all":
        return replace(base, use_text=False, use_adapter=False,
                       use_isc=False, alpha=0.0)
    raise ValueError(f"unknown ablation flag {drop!r}")


def run(config: ExperimentConfig) -> RunResult:
    """Average the configured method over seeds; optionally also run the
    supervised upper bound to report comparative performance."""
    if not config.method_known():
        raise ValueError(f"unknown method {config.method!r}")
    if config.seeds < 1:
        raise ValueError("seeds must be >= 1")
    table = load_table(config)
    incremental_names(config, table)  # surface config errors before training
    t0 = time.time()
    per_seed, manifests, optima = [], [], []
    for k in range(config.seeds):
        seed = config.seed0 + k
        acc, _, scenario = fit_and_score(config.method, config, table, seed)
        per_seed.append(acc)
        manifests.append(scenario.manifest())
        if config.with_optimal and config.method != "optimal":
            opt_acc, _, _ = fit_and_score("optimal", config, table, seed)
            optima.append(opt_acc)
    comparative = None
    if optima:
        comparative = float(np.mean([a / o for a, o in zip(per_seed, optima)]))
    elif config.method == "optimal":
        comparative = 1.0
    result = RunResult(method=config.method, per_seed=per_seed,
                       mean=float(np.mean(per_seed)), std=float(np.std(per_seed)),
                       comparative=comparative, wall_time_s=time.time() - t0,
                       manifests=manifests)
    if config.out:
        write_result(config, result)
    return result


def out_dir(config: ExperimentConfig) -> str:
    root = config.out or os.environ.get(OUT_ROOT_ENV, "results")
    os.makedirs(root, exist_ok=True)
    return root

def write_result(config: ExperimentConfig, result: RunResult,
                 name: str | None = None) -> str:
    """Deterministic result JSON plus a wall-time sidecar."""
    directory = out_dir(config)
    stem = name or f"run_{config.method.replace(':', '_')}_{config_fingerprint(config)}"
    path = os.path.join(directory, stem + ".json")
    payload = {"config": asdict(config), "result": result.to_dict()}
    atomic_write_json(path, _jsonable(payload))
    atomic_write_json(path.replace(".json", ".meta.json"),
                      {"wall_time_s": result.wall_time_s})
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def ablate(config: ExperimentConfig, drop: str) -> RunResult:
    if drop not in ABLATION_FLAGS:
        raise ValueError(f"unknown ablation flag {drop!r}")
    return run(replace(config, method=f"ablation:{drop}"))


def attribute_study(config: ExperimentConfig, mode: str) -> dict:
    """Tiered incremental-column selection: by permutation importance
    (bottom/middle/top thirds) or by count (one / half / all)."""
    if mode not in ("importance_tiers", "count_tiers"):
        raise ValueError(f"unknown study mode {mode!r}")
    table = load_table(config)
    candidates = incremental_names(config, table)
    if mode == "count_tiers" and len(candidates) < 6:
        raise ValueError("count tiers need at least 6 candidate columns")

    if mode == "importance_tiers":
        probe_scen = scenario_for_seed(config, table, config.seed0, incremental=[])
        baseline = train_original(probe_scen, config.backbone, config.train,
                                  seed=config.seed0)
        ranked = [name for name, _ in rank_attributes(probe_scen, baseline,
                                                      seed=config.seed0)
                  if name in set(candidates)]
        k = max(1, len(ranked) // 3)
        tiers = {"unimportant": ranked[-k:], "moderate": ranked[k:2 * k],
                 "very_important": ranked[:k]}
    else:
        half = max(2, len(candidates) // 2)
        tiers = {"few": candidates[:1], "moderate": candidates[:half],
                 "many": list(candidates)}

    results = {}
    for tier, names in tiers.items():
        tier_conf = replace(config, incremental=tuple(names))
        results[tier] = run(tier_conf)
    return {"mode": mode, "tiers": {k: v.to_dict() for k, v in results.items()},
            "tier_columns": {k: list(tiers[k]) for k in tiers}}


def _impute(table: Table, scenario_stats_seed: int, how: str, seed: int) -> Table:
    """Fill MISSING feature cells from column statistics of observed values."""
    rng = np.random.default_rng(seed)
    rows = [list(r) for r in table.rows]
    tgt = table.column_index(table.target_name)
    for j, col in enumerate(table.schema):
        if j == tgt:
            continue
        observed = [r[j] for r in table.rows if r[j] is not MISSING]
        if not observed:
            continue
        if col.kind == "numeric":
            mean_v = float(np.mean(observed))
            lo, hi = float(np.min(observed)), float(np.max(observed))
            for r in rows:
                if r[j] is MISSING:
                    r[j] = mean_v if how == "mean" else float(rng.uniform(lo, hi))
        else:
            tokens = sorted(set(observed))
            counts = {t: observed.count(t) for t in tokens}
            mode_v = max(tokens, key=lambda t: counts[t])
            for r in rows:
                if r[j] is MISSING:
                    r[j] = mode_v if how == "mean" else tokens[rng.integers(len(tokens))]
    return Table(list(table.schema), rows)


def _blank_columns(table: Table, extra: int) -> Table:
    """Reserve extra incremental slots that are blank everywhere."""
    schema = list(table.schema)
    tgt = next(i for i, c in enumerate(schema) if c.role == "target")
    new_cols = [ColumnSpec(f"reserved_{i + 1}", "numeric", "original")
                for i in range(extra)]
    schema = schema[:tgt] + new_cols + schema[tgt:]
    rows = [r[:tgt] + [MISSING] * extra + r[tgt:] for r in table.rows]
    return Table(schema, rows)


def stress_suite(config: ExperimentConfig) -> dict:
    """Four stress sub-experiments: reserved placeholder length, injected
    missing values vs imputation baselines, randomized column names, and
    adaptation from the unlabeled pool alone."""
    table = load_table(config)
    names = incremental_names(config, table)
    report: dict = {}

    # (a) placeholder length: reserve blank slots up to factor * full arity
    full_arity = len([c for c in table.schema if c.role != "target"])
    length = {}
    for factor in (1.0, 1.25, 1.5, 2.0):
        extra = int(np.ceil(full_arity * factor)) - full_arity
        stretched = _blank_columns(table, extra) if extra else table
        cfg = replace(config, incremental=tuple(names
                      + [f"reserved_{i+1}" for i in range(extra)]))
        acc = _run_on_table(cfg, stretched)
        length[f"x{factor:g}"] = acc
    report["placeholder_length"] = length

    # (b) missing values: native handling vs imputation baselines
    missing = {}
    for rate in (0.5, 0.75, 0.9):
        degraded = inject_missing(table, rate, seed=config.seed0)
        entry = {"tabii": _run_on_table(replace(config, incremental=tuple(names)),
                                        degraded)}
        for how in ("mean", "random"):
            imputed = _impute(degraded, config.seed0, how, seed=config.seed0)
            entry[f"{how}_imputation"] = _run_on_table(
                replace(config, incremental=tuple(names)), imputed)
        missing[f"{rate:g}"] = entry
    report["missing_values"] = missing

    # (c) randomized column names
    renamed = randomize_column_names(table, seed=config.seed0)
    mapping = {old.name: new.name for old, new in zip(table.schema, renamed.schema)}
    cfg_named = replace(config, incremental=tuple(mapping[n] for n in names))
    report["column_names"] = {
        "original": _run_on_table(replace(config, incremental=tuple(names)), table),
        "randomized": _run_on_table(cfg_named, renamed),
    }

    # (d) adaptation without the labeled training rows
    cfg_tso = replace(config, incremental=tuple(names),
                      adaptation=replace(config.adaptation, use_train_rows=False))
    report["test_set_only"] = {
        "full": _run_on_table(replace(config, incremental=tuple(names)), table),
        "test_set_only": _run_on_table(cfg_tso, table),
    }
    if config.out:
        atomic_write_json(os.path.join(out_dir(config),
                                       f"stress_{config_fingerprint(config)}.json"),
                          _jsonable(report))
    return report


def _run_on_table(config: ExperimentConfig, table: Table) -> dict:
    accs = []
    for k in range(config.seeds):
        seed = config.seed0 + k
        acc, _, _ = fit_and_score(config.method, config, table, seed,
                                  incremental=list(config.incremental))
        accs.append(acc)
    return {"per_seed": accs, "mean": float(np.mean(accs)),
            "std": float(np.std(accs))}


MI_VARIANTS = ("direct", "discard", "placeholder_only", "tabii")


def mi_report(config: ExperimentConfig) -> dict:
    """Eight probes: I(Z;Y) and I(X;Z) for the four variants."""
    table = load_table(config)
    names = incremental_names(config, table)
    rows = []
    for k in range(config.seeds):
        seed = config.seed0 + k
        per_variant = {}
        for variant in MI_VARIANTS:
            if variant == "placeholder_only":
                method = "ablation:isc"
                acc, model, scenario = fit_and_score(method, config, table, seed,
                                                     incremental=names,
                                                     return_model=True)
            else:
                acc, model, scenario = fit_and_score(
                    variant if variant != "tabii" else "tabii",
                    config, table, seed, incremental=names, return_model=True)
            probes = {}
            for which in ("I_ZY", "I_XZ"):
                est = probe_model(model, scenario, which,
                                  replace(config.mine, seed=seed))
                probes[which] = est.value
            per_variant[variant] = {"accuracy": acc, **probes}
        rows.append({"seed": seed, "variants": per_variant})
    report = {"per_seed": rows}
    if config.out:
        atomic_write_json(os.path.join(out_dir(config),
                                       f"mi_{config_fingerprint(config)}.json"),
                          _jsonable(report))
    return report


def average_rank(matrix: dict) -> dict:
    """matrix: method -> dataset -> accuracy. Dense rank per dataset
    (1 = best), ties get the average of their positions."""
    methods = sorted(matrix)
    datasets = sorted({d for m in methods for d in matrix[m]})
    for m in methods:
        missing_cells = [d for d in datasets if d not in matrix[m]]
        if missing_cells:
            raise ValueError(f"method {m!r} missing datasets {missing_cells}")
    ranks = {m: [] for m in methods}
    for d in datasets:
        accs = np.array([matrix[m][d] for m in methods])
        order = np.argsort(-accs)
        pos = np.empty(len(methods))
        pos[order] = np.arange(1, len(methods) + 1)
        for value in np.unique(accs):
            tied = accs == value
            if tied.sum() > 1:
                pos[tied] = pos[tied].mean()
        for i, m in enumerate(methods):
            ranks[m].append(pos[i])
    return {m: {"mean_rank": float(np.mean(r)), "std": float(np.std(r))}
            for m, r in ranks.items()}


def rank_from_results(result_dir: str) -> dict:
    """Collect per-run result files into a method x dataset matrix and rank."""
    matrix: dict = {}
    for fname in sorted(os.listdir(result_dir)):
        if not fname.endswith(".json") or fname.endswith(".meta.json"):
            continue
        with open(os.path.join(result_dir, fname), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if "result" not in payload:
            continue
        method = payload["result"]["method"]
        dataset = payload["config"].get("data") or payload["config"].get(
            "synthetic", "synthetic")
        matrix.setdefault(method, {})[dataset] = payload["result"]["mean"]
    return average_rank(matrix)


def rank_markdown(matrix: dict, ranks: dict) -> str:
    methods = sorted(matrix)
    datasets = sorted({d for m in methods for d in matrix[m]})
    lines = ["| Method/Dataset | " + " | ".join(datasets) + " | Rank(Std) |",
             "|" + "---|" * (len(datasets) + 2)]
    for m in methods:
        cells = " | ".join(f"{matrix[m][d]:.3f}" for d in datasets)
        r = ranks[m]
        lines.append(f"| {m} | {cells} | {r['mean_rank']:.2f}({r['std']:.2f}) |")
    return "\n".join(lines) + "\n"
