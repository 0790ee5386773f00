"""Estimator facade over the coarse retrieval core.

CompositionalRetriever follows the scikit-learn contract: construction
stores parameters untouched, fit derives trailing-underscore state from
a twin corpus, and get_params/set_params come from BaseEstimator, so the
retriever composes with the usual ecosystem tooling.
"""
from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .embedding import (DEFAULT_DIM, EmbeddingProvider, HashingProvider,
                        ProjectionHead, project_rows)
from .index import (AggregationSpec, CoarseCandidate, build_index, rank_videos,
                    retrieve_topk)
from .relations import RelationConfig, extract_relations
from .twin import DigitalTwin

__all__ = ["CompositionalRetriever", "as_twin_mapping"]


def as_twin_mapping(X) -> dict[str, DigitalTwin]:
    """Validate fit input: a mapping or iterable of twin documents."""
    if isinstance(X, Mapping):
        twins = dict(X)
        for vid, twin in twins.items():
            if not isinstance(twin, DigitalTwin):
                raise TypeError(f"value for {vid!r} is not a DigitalTwin")
            if twin.video_id != vid:
                raise ValueError(f"twin {twin.video_id!r} filed under key {vid!r}")
        return twins
    if isinstance(X, Iterable):
        twins = {}
        for item in X:
            if not isinstance(item, DigitalTwin):
                raise TypeError(f"fit input must contain DigitalTwin values, "
                                f"got {type(item).__name__}")
            if item.video_id in twins:
                raise ValueError(f"duplicate video id {item.video_id!r}")
            twins[item.video_id] = item
        return twins
    raise TypeError("fit input must be a mapping or iterable of DigitalTwin")


class CompositionalRetriever(BaseEstimator):
    """Coarse compositional retrieval with a scikit-learn shaped API.

    fit(twins) extracts relations, renders and embeds components, and
    builds the index (relations_, index_, provider_). rank/retrieve score
    sub-query texts against the fitted corpus; predict returns the top
    video id for each decomposed query in a batch.
    """

    def __init__(self, provider: EmbeddingProvider | None = None,
                 query_head: ProjectionHead | None = None,
                 twin_head: ProjectionHead | None = None,
                 relation_config: RelationConfig | None = None,
                 aggregation: str = "weighted_mean",
                 k: int = 10, dim: int = DEFAULT_DIM):
        self.provider = provider
        self.query_head = query_head
        self.twin_head = twin_head
        self.relation_config = relation_config
        self.aggregation = aggregation
        self.k = k
        self.dim = dim

    def fit(self, X, y=None) -> "CompositionalRetriever":
        twins = as_twin_mapping(X)
        self.provider_ = self.provider or HashingProvider(self.dim)
        config = self.relation_config or RelationConfig()
        self.relations_ = {vid: extract_relations(twin, config)
                           for vid, twin in twins.items()}
        self.index_ = build_index(twins, self.relations_, self.provider_,
                                  self.twin_head)
        return self

    def _check_fitted(self) -> None:
        if not hasattr(self, "index_"):
            raise NotFittedError(
                "This CompositionalRetriever instance is not fitted yet; "
                "call fit with a twin corpus first.")

    def _embed(self, subquery_texts: Sequence[str]) -> np.ndarray:
        if not subquery_texts:
            raise ValueError("need at least one sub-query text")
        raw = self.provider_.embed_texts(list(subquery_texts))
        head = self.query_head or ProjectionHead.identity(self.provider_.dim)
        return project_rows(raw, head)

    def rank(self, subquery_texts: Sequence[str],
             weights: Sequence[float] | None = None) -> list[CoarseCandidate]:
        """Score every fitted video for one decomposed query, best first."""
        self._check_fitted()
        agg = AggregationSpec(mode=self.aggregation,
                              weights=tuple(weights) if weights else None)
        return rank_videos(self.index_, self._embed(subquery_texts), agg)

    def retrieve(self, subquery_texts: Sequence[str],
                 k: int | None = None) -> list[CoarseCandidate]:
        self._check_fitted()
        agg = AggregationSpec(mode=self.aggregation)
        return retrieve_topk(self.index_, self._embed(subquery_texts),
                             self.k if k is None else k, agg)

    def predict(self, X: Sequence[Sequence[str]]) -> list[str]:
        """Top-1 video id for each decomposed query in the batch."""
        self._check_fitted()
        return [self.rank(list(subqueries))[0].video_id for subqueries in X]
