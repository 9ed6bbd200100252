"""Prompt rendering for tabular datasets.

Must stay textually identical to the consumer's rendering: the cache is
keyed by SHA-256 of the prompt, so any drift breaks lookups. The template
carries three slots, each exactly once.
"""
from __future__ import annotations

import csv
import hashlib

DEFAULT_PROMPT_TEMPLATE = (
    "The task is to predict {target} using the given tabular data, where "
    "{feature description} is initially provided. Later, {incremental features} "
    "will be added. The model should pay particular attention to these newly "
    "introduced features for improved performance."
)

TEMPLATE_SLOTS = ("{target}", "{feature description}", "{incremental features}")


def validate_template(template: str) -> None:
    for slot in TEMPLATE_SLOTS:
        if template.count(slot) != 1:
            raise ValueError(f"template must contain {slot} exactly once")


def render_prompt(template: str, target: str, original_columns: list[str],
                  incremental_columns: list[str]) -> str:
    validate_template(template)
    originals = ", ".join(original_columns)
    incrementals = ", ".join(incremental_columns) or "none"
    text = template.replace("{target}", target)
    text = text.replace("{feature description}", originals)
    return text.replace("{incremental features}", incrementals)


def prompt_key(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def prompt_from_csv(path: str, incremental: list[str], target: str | None = None,
                    template: str = DEFAULT_PROMPT_TEMPLATE) -> str:
    """Render the dataset-level prompt from a CSV header."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = next(csv.reader(fh))
    target_name = target if target is not None else header[-1]
    if target_name not in header:
        raise ValueError(f"target column {target_name!r} not in header")
    unknown = set(incremental) - set(header)
    if unknown:
        raise ValueError(f"incremental columns not in header: {sorted(unknown)}")
    originals = [c for c in header if c != target_name and c not in set(incremental)]
    ordered_incremental = [c for c in header if c in set(incremental)]
    return render_prompt(template, target_name, originals, ordered_incremental)
