"""Compositional component index and the coarse retrieval scan.

Every video contributes one embedded component per track and per lifted
relation. A query decomposed into L sub-query vectors scores a video by
aggregating the per-sub-query best component similarity (uniform or
supplied weights for the weighted mean, or the minimum for conjunctive
matching). Entries are stored sorted by (video_id, kind, key) so each
video's block is contiguous for the scoring scan.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .canon import read_json, write_canonical
from .embedding import EmbeddingProvider, ProjectionHead, project_rows
from .errors import ProviderError, UnknownVideoError
from .relations import RelationTuple
from .rendering import render_object_text, render_relation_text
from .twin import DigitalTwin

__all__ = [
    "ComponentDescriptor",
    "ComponentIndex",
    "AggregationSpec",
    "SubqueryWinner",
    "CoarseCandidate",
    "build_index",
    "compositional_score",
    "rank_videos",
    "retrieve_topk",
    "save_index",
    "load_index",
]

logger = logging.getLogger(__name__)

_FORMAT = "component-index/1"
_EMBED_BATCH = 64


@dataclass(frozen=True)
class ComponentDescriptor:
    """Identity and provenance of one indexed component."""

    video_id: str
    kind: str  # "object" | "relation"
    key: str   # track id, or subject:predicate:object
    rendered_text: str


@dataclass(frozen=True)
class SubqueryWinner:
    kind: str
    key: str
    similarity: float


@dataclass(frozen=True)
class CoarseCandidate:
    video_id: str
    score: float
    winners: tuple[SubqueryWinner, ...]  # one per sub-query, in order


@dataclass(frozen=True)
class AggregationSpec:
    """How per-sub-query maxima combine into one video score.

    mode "weighted_mean" uses uniform weights unless explicit positive
    weights (one per sub-query) are given; weights are normalized to sum
    to one. mode "min" takes the worst sub-query, for conjunctive queries.
    """

    mode: str = "weighted_mean"
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.mode not in ("weighted_mean", "min"):
            raise ValueError(f"unknown aggregation mode {self.mode!r}")
        if self.weights is not None:
            if not self.weights or any(w <= 0 for w in self.weights):
                raise ValueError("aggregation weights must be positive")

    def resolve_weights(self, n_subqueries: int) -> np.ndarray:
        if self.weights is None:
            return np.full(n_subqueries, 1.0 / n_subqueries)
        if len(self.weights) != n_subqueries:
            raise ValueError(
                f"{len(self.weights)} weights for {n_subqueries} sub-queries")
        arr = np.asarray(self.weights, dtype=np.float64)
        return arr / arr.sum()


class ComponentIndex:
    """Descriptors plus a contiguous unit-vector matrix, grouped by video."""

    def __init__(self, descriptors: Sequence[ComponentDescriptor],
                 vectors: np.ndarray, meta: dict):
        vectors = np.ascontiguousarray(np.asarray(vectors, dtype=np.float64))
        if vectors.ndim != 2 or vectors.shape[0] != len(descriptors):
            raise ValueError("descriptor/vector row mismatch")
        order = sorted(range(len(descriptors)),
                       key=lambda i: (descriptors[i].video_id, descriptors[i].kind,
                                      descriptors[i].key))
        self.descriptors: tuple[ComponentDescriptor, ...] = tuple(
            descriptors[i] for i in order)
        self.vectors = vectors[order]
        self.vectors.setflags(write=False)
        self.meta = dict(meta)
        self._blocks: dict[str, tuple[int, int]] = {}
        start = 0
        for i, desc in enumerate(self.descriptors):
            if desc.video_id != self.descriptors[start].video_id:
                self._blocks[self.descriptors[start].video_id] = (start, i)
                start = i
        if self.descriptors:
            self._blocks[self.descriptors[start].video_id] = (start, len(self.descriptors))
        seen = set()
        for desc in self.descriptors:
            identity = (desc.video_id, desc.kind, desc.key)
            if identity in seen:
                raise ValueError(f"duplicate component {identity}")
            seen.add(identity)

    @property
    def dim(self) -> int:
        return int(self.meta["dim"])

    def video_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self._blocks))

    def __len__(self) -> int:
        return len(self.descriptors)

    def block(self, video_id: str) -> tuple[int, int]:
        try:
            return self._blocks[video_id]
        except KeyError:
            raise UnknownVideoError(f"video {video_id!r} not in index") from None


def build_index(twins: Mapping[str, DigitalTwin],
                relations: Mapping[str, Sequence[RelationTuple]],
                provider: EmbeddingProvider,
                twin_head: ProjectionHead | None = None) -> ComponentIndex:
    """Render, embed, and project every component of every twin.

    Videos are processed in ascending id order and texts embedded in
    deterministic batches; a provider failure aborts the build naming the
    failing batch. A twin with no instances has no components and is
    rejected, because every indexed video must be retrievable.
    """
    descriptors: list[ComponentDescriptor] = []
    for video_id in sorted(twins):
        twin = twins[video_id]
        if twin.video_id != video_id:
            raise ValueError(f"twin id {twin.video_id!r} filed under {video_id!r}")
        count_before = len(descriptors)
        for track_id in twin.track_ids():
            descriptors.append(ComponentDescriptor(
                video_id, "object", str(track_id), render_object_text(twin, track_id)))
        for rel in relations.get(video_id, ()):
            key = f"{rel.subject_id}:{rel.predicate}:{rel.object_id}"
            descriptors.append(ComponentDescriptor(
                video_id, "relation", key, render_relation_text(twin, rel)))
        if len(descriptors) == count_before:
            raise ValueError(f"video {video_id!r} has no components to index")

    head = twin_head or ProjectionHead.identity(provider.dim)
    vectors = np.empty((len(descriptors), head.out_dim), dtype=np.float64)
    for batch_start in range(0, len(descriptors), _EMBED_BATCH):
        batch = descriptors[batch_start:batch_start + _EMBED_BATCH]
        texts = [desc.rendered_text for desc in batch]
        try:
            raw = provider.embed_texts(texts)
        except ProviderError as exc:
            raise ProviderError(
                f"index build aborted at batch {batch_start // _EMBED_BATCH} "
                f"(components {batch_start}..{batch_start + len(batch) - 1}): {exc}"
            ) from exc
        vectors[batch_start:batch_start + len(batch)] = project_rows(raw, head)

    meta = {
        "format": _FORMAT,
        "dim": head.out_dim,
        "provider_id": provider.provider_id,
        "twin_head_version": head.version,
    }
    return ComponentIndex(descriptors, vectors, meta)


def _score_block(index: ComponentIndex, video_id: str, subquery_vecs: np.ndarray,
                 agg: AggregationSpec) -> CoarseCandidate:
    start, end = index.block(video_id)
    sims = subquery_vecs @ index.vectors[start:end].T  # (L, n_components)
    best = np.argmax(sims, axis=1)  # first maximum wins: canonical entry order
    winners = tuple(
        SubqueryWinner(index.descriptors[start + j].kind,
                       index.descriptors[start + j].key,
                       float(sims[l, j]))
        for l, j in enumerate(best))
    maxima = sims[np.arange(len(best)), best]
    if agg.mode == "min":
        score = float(np.min(maxima))
    else:
        score = float(agg.resolve_weights(len(best)) @ maxima)
    return CoarseCandidate(video_id, score, winners)


def _check_subqueries(index: ComponentIndex, subquery_vecs: np.ndarray) -> np.ndarray:
    arr = np.asarray(subquery_vecs, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1:
        raise ValueError("need at least one sub-query vector")
    if arr.shape[1] != index.dim:
        raise ValueError(f"sub-query dim {arr.shape[1]} does not match index dim {index.dim}")
    return arr


def compositional_score(index: ComponentIndex, video_id: str,
                        subquery_vecs: np.ndarray,
                        agg: AggregationSpec | None = None) -> CoarseCandidate:
    """Score one video: aggregate per-sub-query best component similarity."""
    agg = agg or AggregationSpec()
    arr = _check_subqueries(index, subquery_vecs)
    agg.resolve_weights(arr.shape[0])  # validate weight arity up front
    return _score_block(index, video_id, arr, agg)


def rank_videos(index: ComponentIndex, subquery_vecs: np.ndarray,
                agg: AggregationSpec | None = None) -> list[CoarseCandidate]:
    """Score every indexed video, best first; ties break by ascending id."""
    agg = agg or AggregationSpec()
    arr = _check_subqueries(index, subquery_vecs)
    agg.resolve_weights(arr.shape[0])
    if not len(index):
        raise ValueError("index is empty")
    candidates = [_score_block(index, vid, arr, agg) for vid in index.video_ids()]
    candidates.sort(key=lambda c: (-c.score, c.video_id))
    return candidates


def retrieve_topk(index: ComponentIndex, subquery_vecs: np.ndarray, k: int,
                  agg: AggregationSpec | None = None) -> list[CoarseCandidate]:
    """Top-k prefix of rank_videos; k must be positive."""
    if k < 1:
        raise ValueError(f"k={k} must be positive")
    return rank_videos(index, subquery_vecs, agg)[:k]


def save_index(index: ComponentIndex, path) -> None:
    """Persist descriptors, vectors, and build metadata as canonical JSON."""
    write_canonical(path, {
        "format": _FORMAT,
        "meta": {k: v for k, v in index.meta.items() if k != "format"},
        "entries": [
            {
                "video_id": desc.video_id,
                "kind": desc.kind,
                "key": desc.key,
                "text": desc.rendered_text,
                "vector": [float(x) for x in index.vectors[i]],
            }
            for i, desc in enumerate(index.descriptors)
        ],
    })


def load_index(path) -> ComponentIndex:
    raw = read_json(path)
    if raw.get("format") != _FORMAT:
        raise ValueError(f"not a component index file: {path}")
    meta = dict(raw["meta"])
    meta["format"] = _FORMAT
    entries = raw["entries"]
    descriptors = [
        ComponentDescriptor(e["video_id"], e["kind"], e["key"], e["text"])
        for e in entries
    ]
    dim = int(meta["dim"])
    vectors = np.zeros((len(entries), dim), dtype=np.float64)
    for i, e in enumerate(entries):
        row = np.asarray(e["vector"], dtype=np.float64)
        if row.shape != (dim,):
            raise ValueError(f"entry {i} vector has dim {row.shape}, expected {dim}")
        vectors[i] = row
    return ComponentIndex(descriptors, vectors, meta)
