"""Command line: render dataset prompts, embed them, verify caches."""
from __future__ import annotations

import argparse
import json
import sys

from .client import API_KEY_ENV, EmbedJob, embed_and_cache
from .prompts import DEFAULT_PROMPT_TEMPLATE, prompt_from_csv
from .verify import verify_cache


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="embed-client",
        description="embed dataset prompts into the tabii cache format "
                    f"(API key via ${API_KEY_ENV})")
    sub = parser.add_subparsers(dest="command", required=True)

    p_embed = sub.add_parser("embed", help="embed a dataset's prompt")
    p_embed.add_argument("--data", required=True, help="CSV file with header")
    p_embed.add_argument("--incremental", required=True,
                         help="comma-separated incremental column names")
    p_embed.add_argument("--target", help="target column (default: last)")
    p_embed.add_argument("--endpoint", required=True)
    p_embed.add_argument("--model", required=True)
    p_embed.add_argument("--out", required=True, help="cache path (.jsonl)")
    p_embed.add_argument("--template", default=DEFAULT_PROMPT_TEMPLATE)
    p_embed.add_argument("--request-format", default="openai",
                         choices=["openai", "plain"])
    p_embed.add_argument("--batch-size", type=int, default=16)

    p_verify = sub.add_parser("verify", help="validate a cache file")
    p_verify.add_argument("path")

    args = parser.parse_args(argv)

    if args.command == "embed":
        incremental = [c.strip() for c in args.incremental.split(",") if c.strip()]
        prompt = prompt_from_csv(args.data, incremental, target=args.target,
                                 template=args.template)
        job = EmbedJob(prompts=[prompt], endpoint=args.endpoint, model=args.model,
                       out_path=args.out, batch_size=args.batch_size,
                       request_format=args.request_format)
        result = embed_and_cache(job)
        print(json.dumps(result, indent=2))
        return 0

    report = verify_cache(args.path)
    print(json.dumps(report, indent=2))
    return 0 if report["ok"] else 1


if __name__ == "__main__":
    sys.exit(main())
