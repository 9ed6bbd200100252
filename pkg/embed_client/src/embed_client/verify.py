"""Cache validation: key format, constant dimension, finite values."""
from __future__ import annotations

import json
import math
import os
import string

HEX = set(string.hexdigits.lower())


def verify_cache(path: str) -> dict:
    """Report-only check; `ok` is False on any problem, `warnings` lists an
    empty cache, `errors` carry offending line numbers."""
    report = {"path": path, "ok": True, "records": 0, "dim": None,
              "errors": [], "warnings": []}
    if not os.path.exists(path):
        report["ok"] = False
        report["errors"].append("file does not exist")
        return report
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                report["errors"].append(f"line {line_no}: invalid JSON ({e.msg})")
                continue
            key = rec.get("key", "")
            if len(key) != 64 or not set(key) <= HEX:
                report["errors"].append(f"line {line_no}: malformed key")
            dim = rec.get("dim")
            vector = rec.get("vector", [])
            if not isinstance(dim, int) or len(vector) != dim:
                report["errors"].append(f"line {line_no}: vector/dim mismatch")
            elif report["dim"] is None:
                report["dim"] = dim
            elif dim != report["dim"]:
                report["errors"].append(
                    f"line {line_no}: dim {dim} != file dim {report['dim']}")
            if any(not isinstance(v, (int, float)) or not math.isfinite(v)
                   for v in vector):
                report["errors"].append(f"line {line_no}: non-finite values")
            report["records"] += 1
    if report["records"] == 0:
        report["warnings"].append("empty cache")
        report["ok"] = False
    if report["errors"]:
        report["ok"] = False
    return report
