#!/usr/bin/env python3
"""Opt-in protocol runner for user-supplied CSV datasets.

Runs discard / direct / tabii (and optionally the supervised upper bound)
over several seeds per dataset, then prints the cross-dataset rank table.
Datasets are given as `name=path:col1,col2` (incremental columns after the
colon). Not part of the test suite; intended for desk-scale reproductions
on real data.

Example:
    python scripts/paper_benchmark.py \
        --dataset diabetes=diabetes.csv:Insulin,SkinThickness \
        --dataset credit=credit.csv:duration,amount --seeds 4
"""

import argparse
import os
import sys
from dataclasses import replace

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from tabii.harness import ExperimentConfig, average_rank, rank_markdown, run


def parse_dataset(spec: str):
    name, rest = spec.split("=", 1)
    path, cols = rest.split(":", 1)
    return name, path, tuple(c.strip() for c in cols.split(",") if c.strip())


def main():
    parser = argparse.ArgumentParser(description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--dataset", action="append", required=True,
                        help="name=path.csv:incremental,columns")
    parser.add_argument("--target", help="target column (default: last)")
    parser.add_argument("--seeds", type=int, default=4)
    parser.add_argument("--with-optimal", action="store_true")
    parser.add_argument("--out", default="results")
    args = parser.parse_args()

    methods = ["discard", "direct", "tabii"] + (["optimal"] if args.with_optimal else [])
    matrix = {m: {} for m in methods}
    for spec in args.dataset:
        name, path, incremental = parse_dataset(spec)
        base = ExperimentConfig(data=path, target=args.target,
                                incremental=incremental, seeds=args.seeds,
                                out=args.out)
        for method in methods:
            result = run(replace(base, method=method))
            matrix[method][name] = result.mean
            print(f"{name:12s} {method:8s} mean={result.mean:.4f} "
                  f"std={result.std:.4f}")

    if len(args.dataset) >= 1:
        print("\n" + rank_markdown(matrix, average_rank(matrix)))


if __name__ == "__main__":
    main()
