"""Cache validation reports."""

import json

from embed_client.prompts import prompt_key
from embed_client.verify import verify_cache


def write_lines(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def test_valid_cache_ok(tmp_path):
    path = tmp_path / "cache.jsonl"
    write_lines(path, [
        {"key": prompt_key("a"), "dim": 2, "vector": [1.0, 2.0]},
        {"key": prompt_key("b"), "dim": 2, "vector": [3.0, 4.0]},
    ])
    report = verify_cache(str(path))
    assert report["ok"] and report["records"] == 2 and report["dim"] == 2


def test_dim_mismatch_names_line(tmp_path):
    path = tmp_path / "cache.jsonl"
    write_lines(path, [
        {"key": prompt_key("a"), "dim": 2, "vector": [1.0, 2.0]},
        {"key": prompt_key("b"), "dim": 3, "vector": [3.0, 4.0, 5.0]},
    ])
    report = verify_cache(str(path))
    assert not report["ok"]
    assert any("line 2" in e for e in report["errors"])


def test_empty_cache_warns_with_nonzero_status(tmp_path):
    path = tmp_path / "cache.jsonl"
    path.write_text("")
    report = verify_cache(str(path))
    assert not report["ok"]
    assert "empty cache" in report["warnings"]
    from embed_client.cli import main
    assert main(["verify", str(path)]) == 1


def test_malformed_key_flagged(tmp_path):
    path = tmp_path / "cache.jsonl"
    write_lines(path, [{"key": "nothex", "dim": 1, "vector": [0.5]}])
    report = verify_cache(str(path))
    assert not report["ok"]


def test_nonfinite_vector_flagged(tmp_path):
    path = tmp_path / "cache.jsonl"
    path.write_text(json.dumps({"key": prompt_key("a"), "dim": 2,
                                "vector": [1.0, None]}) + "\n")
    report = verify_cache(str(path))
    assert not report["ok"]
