"""Offline embedding client: renders dataset prompts, calls a text-embedding
service, and writes the JSON-Lines cache consumed by the tabii pipeline."""

__version__ = "0.1.0"

from .client import EmbedJob, DimDriftError, ServiceError, embed_and_cache
from .prompts import DEFAULT_PROMPT_TEMPLATE, prompt_key, render_prompt
from .verify import verify_cache
