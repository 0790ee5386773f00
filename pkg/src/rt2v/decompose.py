"""Query decomposition into typed sub-queries via a language model.

The LLM seam is one method: complete(prompt, schema_id) -> text. Prompts
embed a single-line canonical-JSON INPUT block, which lets the fixture
client recover the lookup key deterministically, making it a pure
function of the prompt. Invalid responses are re-asked with the
validation error appended, at most twice.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import httpx
import numpy as np

from .canon import canonical_json
from .embedding import EmbeddingProvider, ProjectionHead, apply_projection
from .errors import DecompositionError

__all__ = [
    "SUBQUERY_KINDS",
    "MAX_SUBQUERIES",
    "SubQuery",
    "LlmClient",
    "ScriptedLlmClient",
    "FixtureLlmClient",
    "RemoteLlmClient",
    "query_fixture_key",
    "build_decompose_prompt",
    "decompose",
    "embed_subqueries",
]

logger = logging.getLogger(__name__)

SUBQUERY_KINDS = ("action", "attribute", "spatial", "temporal")
MAX_SUBQUERIES = 16
_MAX_REASKS = 2

DECOMPOSE_SCHEMA_ID = "subqueries/1"
REASONING_SCHEMA_ID = "reasoning/1"

_INPUT_MARKER = "\nINPUT:\n"

_DECOMPOSE_INSTRUCTIONS = """\
Decompose the retrieval query in the INPUT block into independent sub-queries.
Reply with a JSON array only. Each element is an object with:
  "text": a short self-contained phrase (non-empty string),
  "kind": one of "action", "attribute", "spatial", "temporal",
  "weight": optional positive number (default 1).
Use between 1 and 16 elements and preserve the query's meaning."""


@dataclass(frozen=True)
class SubQuery:
    text: str
    kind: str
    weight: float = 1.0


class LlmClient(Protocol):
    def complete(self, prompt: str, schema_id: str) -> str: ...


def query_fixture_key(query: str) -> str:
    """Stable fixture filename stem for a query text."""
    return hashlib.sha256(query.encode("utf-8")).hexdigest()[:16]


def build_decompose_prompt(query: str) -> str:
    return _DECOMPOSE_INSTRUCTIONS + _INPUT_MARKER + canonical_json({"query": query})


def parse_prompt_input(prompt: str) -> dict:
    """Recover the canonical-JSON INPUT block embedded in a prompt."""
    if _INPUT_MARKER not in prompt:
        raise ValueError("prompt has no INPUT block")
    tail = prompt.split(_INPUT_MARKER, 1)[1]
    return json.loads(tail.splitlines()[0])


class ScriptedLlmClient:
    """Returns canned responses in order; records every prompt it saw."""

    def __init__(self, responses: Sequence[str]):
        self._responses = list(responses)
        self.prompts: list[tuple[str, str]] = []

    def complete(self, prompt: str, schema_id: str) -> str:
        self.prompts.append((prompt, schema_id))
        if not self._responses:
            return ""
        if len(self._responses) == 1:
            return self._responses[0]
        return self._responses.pop(0)


class FixtureLlmClient:
    """Serves recorded responses from a fixture directory.

    Decomposition responses live at decompositions/<key>.json where key
    hashes the query text; reasoning responses live at reasoner/<key>.json
    as {video_id: [turn, ...]} selected by the prompt's turn counter. A
    missing fixture yields a deterministic non-JSON sentinel naming the
    path, which flows down the ordinary schema-failure path.
    """

    def __init__(self, root: Path | str):
        self.root = Path(root)

    def complete(self, prompt: str, schema_id: str) -> str:
        try:
            block = parse_prompt_input(prompt)
        except (ValueError, json.JSONDecodeError) as exc:
            return f"fixture client could not parse prompt input: {exc}"
        key = query_fixture_key(block.get("query", ""))
        if schema_id == DECOMPOSE_SCHEMA_ID:
            path = self.root / "decompositions" / f"{key}.json"
            if not path.is_file():
                return f"missing decomposition fixture: {path}"
            return path.read_text(encoding="utf-8")
        if schema_id == REASONING_SCHEMA_ID:
            path = self.root / "reasoner" / f"{key}.json"
            if not path.is_file():
                return f"missing reasoner fixture: {path}"
            table = json.loads(path.read_text(encoding="utf-8"))
            turns = table.get(block.get("video_id", ""))
            if not turns:
                return f"no scripted turns for video {block.get('video_id')!r} in {path}"
            turn = min(int(block.get("turn", 0)), len(turns) - 1)
            return canonical_json(turns[turn])
        return f"unknown schema {schema_id!r}"


class RemoteLlmClient:
    """Chat-completions HTTP client with retry/backoff."""

    def __init__(self, url: str, model: str, api_key: str | None = None,
                 timeout_s: float = 30.0, retries: int = 2, backoff_s: float = 0.5,
                 transport: httpx.BaseTransport | None = None):
        self.url = url
        self.model = model
        self._retries = retries
        self._backoff_s = backoff_s
        headers = {}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout_s, headers=headers,
                                    transport=transport)

    def complete(self, prompt: str, schema_id: str) -> str:
        payload = {
            "model": self.model,
            "messages": [{"role": "user", "content": prompt}],
            "response_format": {"type": "json_object", "schema_id": schema_id},
        }
        last_error: Exception | None = None
        for attempt in range(self._retries + 1):
            if attempt:
                time.sleep(self._backoff_s * 2 ** (attempt - 1))
            try:
                response = self._client.post(self.url, json=payload)
                response.raise_for_status()
                body = response.json()
                return body["choices"][0]["message"]["content"]
            except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
                last_error = exc
                logger.warning("llm request failed (attempt %d): %s", attempt + 1, exc)
        raise DecompositionError(
            f"llm endpoint failed after {self._retries + 1} attempts: {last_error}", [])


def _validate_subqueries(raw_text: str) -> list[SubQuery] | str:
    """Parse one response; returns sub-queries or an error description."""
    try:
        data = json.loads(raw_text)
    except json.JSONDecodeError as exc:
        return f"response is not valid JSON: {exc}"
    if not isinstance(data, list):
        return "response must be a JSON array"
    if not data:
        return "response array is empty"
    if len(data) > MAX_SUBQUERIES:
        return f"response has {len(data)} sub-queries, maximum is {MAX_SUBQUERIES}"
    out: list[SubQuery] = []
    for i, item in enumerate(data):
        if not isinstance(item, dict):
            return f"element {i} is not an object"
        text = item.get("text")
        kind = item.get("kind")
        weight = item.get("weight", 1.0)
        if not isinstance(text, str) or not text.strip():
            return f"element {i}: 'text' must be a non-empty string"
        if kind not in SUBQUERY_KINDS:
            return f"element {i}: 'kind' must be one of {list(SUBQUERY_KINDS)}"
        if isinstance(weight, bool) or not isinstance(weight, (int, float)) or weight <= 0:
            return f"element {i}: 'weight' must be a positive number"
        extra = set(item) - {"text", "kind", "weight"}
        if extra:
            return f"element {i}: unexpected fields {sorted(extra)}"
        out.append(SubQuery(text=text, kind=kind, weight=float(weight)))
    return out


def decompose(query: str, client: LlmClient) -> list[SubQuery]:
    """Decompose a query, re-asking on invalid responses at most twice."""
    if not query or not query.strip():
        raise ValueError("query text is empty")
    base_prompt = build_decompose_prompt(query)
    prompt = base_prompt
    raw_responses: list[str] = []
    for _ in range(1 + _MAX_REASKS):
        response = client.complete(prompt, DECOMPOSE_SCHEMA_ID)
        raw_responses.append(response)
        result = _validate_subqueries(response)
        if isinstance(result, list):
            return result
        logger.warning("decomposition response rejected: %s", result)
        prompt = base_prompt + f"\nPREVIOUS_RESPONSE_ERROR: {result}"
    raise DecompositionError(
        f"decomposition failed after {_MAX_REASKS} re-asks: {result}", raw_responses)


def embed_subqueries(subqueries: Sequence[SubQuery], provider: EmbeddingProvider,
                     query_head: ProjectionHead | None = None) -> np.ndarray:
    """Embed sub-query texts and project with the query head (rows unit-norm)."""
    if not subqueries:
        raise ValueError("no sub-queries to embed")
    head = query_head or ProjectionHead.identity(provider.dim)
    raw = provider.embed_texts([sq.text for sq in subqueries])
    return np.stack([apply_projection(row, head) for row in raw])
