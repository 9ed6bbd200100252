"""Command line for the experiment harness.

Subcommands mirror the harness operations; a JSON config file can override
any flag, and TABII_OUT sets the default output root.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

from .adaptation import AdaptationConfig
from .data import SplitSpec
from .encoder import BackboneConfig, TrainSettings
from .harness import (ABLATION_FLAGS, ExperimentConfig, ablate,
                      attribute_study, average_rank, mi_report,
                      rank_from_results, rank_markdown, run, stress_suite,
                      write_result, OUT_ROOT_ENV)
from .mine import StatisticsNetConfig
from .synth import incremental_table, separable_table
from .data import save_csv


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="CSV file; omit to use the synthetic generator")
    p.add_argument("--schema", help="optional schema JSON for the CSV")
    p.add_argument("--target", help="target column (default: last)")
    p.add_argument("--incremental", help="comma-separated incremental column names")
    p.add_argument("--synthetic", default="informative",
                   choices=["informative", "null", "noise", "separable"])
    p.add_argument("--rows", type=int, default=1800, help="synthetic row count")
    p.add_argument("--method", default="tabii",
                   help="discard | direct | tabii | optimal | ablation:<flag>")
    p.add_argument("--seeds", type=int, default=4)
    p.add_argument("--seed0", type=int, default=0)
    p.add_argument("--out", help=f"output dir (default ${OUT_ROOT_ENV} or ./results)")
    p.add_argument("--with-optimal", action="store_true",
                   help="also run the supervised upper bound for comparative performance")
    p.add_argument("--epochs", type=int, help="adaptation epochs override")
    p.add_argument("--provider", default="hash", help="hash | file:<cache.jsonl>")
    p.add_argument("--config", help="JSON file overriding any of these flags")


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    overrides = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)

    def pick(flag, default=None):
        if flag in overrides:
            return overrides[flag]
        return getattr(args, flag, None) if getattr(args, flag, None) is not None else default

    incremental = pick("incremental", ())
    if isinstance(incremental, str):
        incremental = tuple(s.strip() for s in incremental.split(",") if s.strip())
    adaptation = AdaptationConfig(**overrides.get("adaptation", {}))
    if pick("epochs"):
        adaptation = replace(adaptation, epochs=int(pick("epochs")))
    config = ExperimentConfig(
        data=pick("data"),
        schema=pick("schema"),
        target=pick("target"),
        incremental=tuple(incremental),
        synthetic=None if pick("data") else pick("synthetic", "informative"),
        synthetic_rows=int(pick("rows", 1800)),
        method=pick("method", "tabii"),
        seeds=int(pick("seeds", 4)),
        seed0=int(pick("seed0", 0)),
        out=pick("out"),
        with_optimal=bool(pick("with_optimal", False) or args.with_optimal),
        provider=pick("provider", "hash"),
        backbone=BackboneConfig(**overrides.get("backbone", {})),
        train=TrainSettings(**overrides.get("train", {})),
        adaptation=adaptation,
        mine=StatisticsNetConfig(**overrides.get("mine", {})),
        split=SplitSpec(**overrides.get("split", {})),
    )
    return config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tabii",
                                     description="tabular incremental inference harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="train and score one method")
    _add_common(p_run)

    p_ablate = sub.add_parser("ablate", help="run a component ablation")
    _add_common(p_ablate)
    p_ablate.add_argument("--drop", required=True, choices=list(ABLATION_FLAGS))

    p_study = sub.add_parser("study", help="attribute importance/count tiers")
    _add_common(p_study)
    p_study.add_argument("--mode", required=True, choices=["importance", "count"])

    p_stress = sub.add_parser("stress", help="length/missing/name/no-train stress suite")
    _add_common(p_stress)

    p_mi = sub.add_parser("mi-report", help="mutual-information probes for 4 variants")
    _add_common(p_mi)

    p_rank = sub.add_parser("rank", help="aggregate result files into a rank table")
    p_rank.add_argument("--in", dest="indir", required=True)
    p_rank.add_argument("--out", help="markdown output path")

    p_synth = sub.add_parser("synth", help="write a synthetic dataset CSV")
    p_synth.add_argument("--mode", default="informative",
                         choices=["informative", "null", "noise", "separable"])
    p_synth.add_argument("--rows", type=int, default=1800)
    p_synth.add_argument("--seed", type=int, default=100)
    p_synth.add_argument("--out", required=True)

    args = parser.parse_args(argv)

    if args.command == "rank":
        ranks = rank_from_results(args.indir)
        matrix = {}
        for fname in sorted(os.listdir(args.indir)):
            if not fname.endswith(".json") or fname.endswith(".meta.json"):
                continue
            with open(os.path.join(args.indir, fname), "r", encoding="utf-8") as fh:
                payload = json.load(fh)
            if "result" not in payload:
                continue
            method = payload["result"]["method"]
            dataset = payload["config"].get("data") or payload["config"].get(
                "synthetic", "synthetic")
            matrix.setdefault(method, {})[dataset] = payload["result"]["mean"]
        md = rank_markdown(matrix, ranks)
        if args.out:
            with open(args.out, "w", encoding="utf-8") as fh:
                fh.write(md)
        print(md)
        return 0

    if args.command == "synth":
        if args.mode == "separable":
            table = separable_table(n=args.rows, seed=args.seed)
        else:
            table = incremental_table(n=args.rows, seed=args.seed, mode=args.mode)
        save_csv(table, args.out)
        print(f"wrote {args.out} ({table.n_rows} rows)")
        return 0

    config = _config_from_args(args)
    if args.command == "run":
        result = run(config)
        print(json.dumps(result.to_dict(), indent=2))
    elif args.command == "ablate":
        result = ablate(config, args.drop)
        print(json.dumps(result.to_dict(), indent=2))
    elif args.command == "study":
        mode = "importance_tiers" if args.mode == "importance" else "count_tiers"
        print(json.dumps(attribute_study(config, mode), indent=2))
    elif args.command == "stress":
        print(json.dumps(stress_suite(config), indent=2))
    elif args.command == "mi-report":
        print(json.dumps(mi_report(config), indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
