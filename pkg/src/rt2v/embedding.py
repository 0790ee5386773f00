"""Text embedding providers and learned projection heads.

Two providers share one contract (ordered batch in, unit-norm float64
matrix out): a hermetic token-hashing provider used offline and in
fixtures, and a remote HTTP provider. Projection heads are linear maps
re-normalized after application; the identity head is a no-op on unit
vectors.
"""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass
from typing import Protocol, Sequence

import httpx
import numpy as np

from .canon import canonical_json, read_json, write_canonical
from .errors import ProviderError

__all__ = [
    "DEFAULT_DIM",
    "hash_embed",
    "EmbeddingProvider",
    "HashingProvider",
    "RemoteEmbeddingProvider",
    "ProjectionHead",
    "apply_projection",
    "project_rows",
]

logger = logging.getLogger(__name__)

DEFAULT_DIM = 256

_FNV_OFFSET = 14695981039346656037
_FNV_PRIME = 1099511628211
_U64 = (1 << 64) - 1


def _fnv1a64(data: bytes) -> int:
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _U64
    return h


def _tokenize(text: str) -> list[str]:
    lowered = text.lower()
    cleaned = "".join(c if c.isalnum() else " " for c in lowered)
    return cleaned.split()


def hash_embed(text: str, dim: int = DEFAULT_DIM) -> np.ndarray:
    """Deterministic signed token-hash embedding, unit L2 norm.

    Tokens are lowercased alphanumeric runs; each token lands in bucket
    fnv1a64(token) mod dim with sign from the hash's top bit. Text with
    no signal (empty or fully cancelling) maps to the first basis vector.
    """
    if dim < 1:
        raise ValueError(f"dim={dim} must be positive")
    acc = np.zeros(dim, dtype=np.float64)
    for token in _tokenize(text):
        h = _fnv1a64(token.encode("utf-8"))
        sign = 1.0 if (h >> 63) == 0 else -1.0
        acc[h % dim] += sign
    norm = float(np.linalg.norm(acc))
    if norm == 0.0:
        acc[0] = 1.0
        return acc
    return acc / norm


class EmbeddingProvider(Protocol):
    """Ordered batch embedding: row i of the result embeds texts[i]."""

    dim: int
    provider_id: str

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray: ...


class HashingProvider:
    """Hermetic provider backed by hash_embed; exact across runs."""

    def __init__(self, dim: int = DEFAULT_DIM):
        self.dim = dim
        self.provider_id = f"fnv1a-hash/{dim}"

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        out = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            out[i] = hash_embed(text, self.dim)
        return out


class RemoteEmbeddingProvider:
    """HTTP provider speaking the embeddings wire contract.

    POST {"model", "input": [texts]} and read {"data": [{"index",
    "embedding"}]}; rows are reordered by the returned index. Transport
    errors and 5xx responses are retried with exponential backoff before
    raising ProviderError.
    """

    def __init__(self, url: str, model: str, dim: int = DEFAULT_DIM,
                 api_key: str | None = None, timeout_s: float = 30.0,
                 retries: int = 2, backoff_s: float = 0.5,
                 transport: httpx.BaseTransport | None = None):
        self.url = url
        self.model = model
        self.dim = dim
        self.provider_id = f"remote/{model}/{dim}"
        self._retries = retries
        self._backoff_s = backoff_s
        headers = {}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        self._client = httpx.Client(timeout=timeout_s, headers=headers,
                                    transport=transport)

    def embed_texts(self, texts: Sequence[str]) -> np.ndarray:
        payload = {"model": self.model, "input": list(texts)}
        last_error: Exception | None = None
        for attempt in range(self._retries + 1):
            if attempt:
                time.sleep(self._backoff_s * 2 ** (attempt - 1))
            try:
                response = self._client.post(self.url, json=payload)
                if response.status_code >= 500:
                    raise ProviderError(f"server returned {response.status_code}")
                response.raise_for_status()
                return self._unpack(response.json(), len(texts))
            except (httpx.HTTPError, ProviderError) as exc:
                last_error = exc
                logger.warning("embedding request failed (attempt %d): %s",
                               attempt + 1, exc)
        raise ProviderError(
            f"embedding endpoint failed after {self._retries + 1} attempts: {last_error}")

    def _unpack(self, body: dict, expected: int) -> np.ndarray:
        rows = body.get("data")
        if not isinstance(rows, list) or len(rows) != expected:
            raise ProviderError(f"expected {expected} embedding rows, got {rows!r:.80}")
        out = np.zeros((expected, self.dim), dtype=np.float64)
        seen: set[int] = set()
        for row in rows:
            idx = row.get("index")
            vec = np.asarray(row.get("embedding"), dtype=np.float64)
            if not isinstance(idx, int) or idx in seen or not 0 <= idx < expected:
                raise ProviderError(f"bad embedding row index {idx!r}")
            if vec.shape != (self.dim,) or not np.all(np.isfinite(vec)):
                raise ProviderError(f"embedding row {idx} is not a finite {self.dim}-vector")
            seen.add(idx)
            norm = float(np.linalg.norm(vec))
            if norm == 0.0:
                raise ProviderError(f"embedding row {idx} is the zero vector")
            out[idx] = vec / norm
        return out


@dataclass(frozen=True)
class ProjectionHead:
    """A linear projection applied before re-normalization."""

    weights: np.ndarray  # (out_dim, in_dim), float64

    def __post_init__(self):
        arr = np.asarray(self.weights, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError(f"head weights must be 2-D, got shape {arr.shape}")
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "weights", arr)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def version(self) -> str:
        """Short content hash identifying these weights."""
        return hashlib.sha256(self.weights.tobytes()).hexdigest()[:12]

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(np.eye(dim, dtype=np.float64))

    @classmethod
    def seeded_init(cls, dim: int, seed: int, noise_scale: float = 1e-3) -> "ProjectionHead":
        rng = np.random.default_rng(seed)
        return cls(np.eye(dim) + noise_scale * rng.standard_normal((dim, dim)))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ProjectionHead):
            return NotImplemented
        return self.weights.shape == other.weights.shape and bool(
            np.array_equal(self.weights, other.weights))

    def save(self, path, seed: int | None = None, train_config: dict | None = None) -> None:
        """Persist as canonical JSON: dims, row-major weights, provenance."""
        write_canonical(path, {
            "format": "projection-head/1",
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "weights": [float(w) for w in self.weights.reshape(-1)],
            "seed": seed,
            "train_config": train_config,
        })

    @classmethod
    def load(cls, path) -> "ProjectionHead":
        raw = read_json(path)
        if raw.get("format") != "projection-head/1":
            raise ValueError(f"not a projection head file: {path}")
        weights = np.asarray(raw["weights"], dtype=np.float64)
        return cls(weights.reshape(raw["out_dim"], raw["in_dim"]))

    def checkpoint_text(self, seed: int | None = None,
                        train_config: dict | None = None) -> str:
        return canonical_json({
            "format": "projection-head/1",
            "in_dim": self.in_dim,
            "out_dim": self.out_dim,
            "weights": [float(w) for w in self.weights.reshape(-1)],
            "seed": seed,
            "train_config": train_config,
        })


def apply_projection(vec: np.ndarray, head: ProjectionHead) -> np.ndarray:
    """Project one vector and re-normalize to unit length."""
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (head.in_dim,):
        raise ValueError(f"vector dim {vec.shape} does not match head in_dim {head.in_dim}")
    projected = head.weights @ vec
    norm = float(np.linalg.norm(projected))
    if norm == 0.0:
        raise ValueError("projection collapsed the vector to zero")
    return projected / norm


def project_rows(matrix: np.ndarray, head: ProjectionHead) -> np.ndarray:
    """Row-wise apply_projection over an (n, in_dim) matrix."""
    matrix = np.asarray(matrix, dtype=np.float64)
    projected = matrix @ head.weights.T
    norms = np.linalg.norm(projected, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("projection collapsed a row to zero")
    return projected / norms[:, None]
