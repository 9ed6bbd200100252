"""Batched embedding requests with retry/backoff and an atomic cache writer.

The cache file is JSON Lines, one record per unique prompt:
    {"key": <sha256 of prompt text>, "dim": N, "vector": [floats]}
Existing keys are never re-requested, so a rerun over a complete cache makes
zero service calls; the file on disk is always either absent or complete
(temp file + atomic rename).
"""
from __future__ import annotations

import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import requests

from .prompts import prompt_key

API_KEY_ENV = "EMBED_API_KEY"


class ServiceError(RuntimeError):
    pass


class AuthError(ServiceError):
    pass


class DimDriftError(ValueError):
    pass


@dataclass
class EmbedJob:
    prompts: list
    endpoint: str
    model: str
    out_path: str
    batch_size: int = 16
    max_in_flight: int = 2
    request_format: str = "openai"   # or "plain"
    timeout_s: float = 30.0
    max_retries: int = 4
    backoff_s: float = 0.5

    def __post_init__(self):
        if not self.prompts:
            raise ValueError("job needs at least one prompt")
        if self.request_format not in ("openai", "plain"):
            raise ValueError(f"unknown request format {self.request_format!r}")


def _request_payload(job: EmbedJob, texts: list) -> dict:
    if job.request_format == "openai":
        return {"model": job.model, "input": texts}
    return {"model": job.model, "texts": texts}


def _parse_response(job: EmbedJob, payload: dict, expected: int) -> list:
    try:
        if job.request_format == "openai":
            vectors = [rec["embedding"] for rec in payload["data"]]
        else:
            vectors = payload["embeddings"]
    except (KeyError, TypeError) as e:
        raise ServiceError(f"malformed response: {e}")
    if len(vectors) != expected:
        raise ServiceError(f"expected {expected} vectors, got {len(vectors)}")
    return vectors


def _post_batch(job: EmbedJob, texts: list, api_key: str | None) -> list:
    headers = {"Content-Type": "application/json"}
    if api_key:
        headers["Authorization"] = f"Bearer {api_key}"
    delay = job.backoff_s
    last = None
    for attempt in range(job.max_retries + 1):
        try:
            resp = requests.post(job.endpoint, json=_request_payload(job, texts),
                                 headers=headers, timeout=job.timeout_s)
        except requests.RequestException as e:
            last = ServiceError(f"request failed: {e}")
        else:
            if resp.status_code in (401, 403):
                raise AuthError(f"authentication failed ({resp.status_code})")
            if resp.status_code == 200:
                return _parse_response(job, resp.json(), len(texts))
            # transient (5xx / 429) or unexpected status: retry with backoff
            last = ServiceError(f"status {resp.status_code}: {resp.text[:200]}")
        if attempt < job.max_retries:
            time.sleep(delay)
            delay *= 2
    raise last


def read_cache(path: str) -> dict:
    """Existing records keyed by prompt hash; {} when the file is absent."""
    records: dict = {}
    if not os.path.exists(path):
        return records
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                records[rec["key"]] = rec
    return records


def _write_atomic(path: str, records: dict) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for key in sorted(records):
                fh.write(json.dumps(records[key], sort_keys=True) + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def embed_and_cache(job: EmbedJob, api_key: str | None = None) -> dict:
    """Fetch embeddings for all prompts not already cached; returns a small
    report {requested, skipped, dim, path}."""
    if api_key is None:
        api_key = os.environ.get(API_KEY_ENV)
    records = read_cache(job.out_path)

    todo, seen = [], set()
    for text in job.prompts:
        key = prompt_key(text)
        if key in records or key in seen:
            continue
        seen.add(key)
        todo.append((key, text))

    batches = [todo[i:i + job.batch_size]
               for i in range(0, len(todo), job.batch_size)]
    results: dict = {}
    if batches:
        with ThreadPoolExecutor(max_workers=job.max_in_flight) as pool:
            futures = [pool.submit(_post_batch, job, [t for _, t in chunk], api_key)
                       for chunk in batches]
            for chunk, future in zip(batches, futures):
                vectors = future.result()
                for (key, _), vec in zip(chunk, vectors):
                    results[key] = vec

    dim = None
    for rec in records.values():
        dim = rec["dim"]
        break
    for key, vec in results.items():
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise DimDriftError(f"vector of dim {len(vec)} in a dim-{dim} cache")
        records[key] = {"key": key, "dim": dim,
                        "vector": [float(v) for v in vec]}

    if results or not os.path.exists(job.out_path):
        _write_atomic(job.out_path, records)
    return {"requested": len(results), "skipped": len(job.prompts) - len(results),
            "dim": dim, "path": job.out_path}
