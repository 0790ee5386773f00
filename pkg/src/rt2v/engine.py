"""End-to-end pipeline assembly shared by the CLI and the HTTP service.

The engine owns the loaded benchmark, the component index, the heads,
and the provider/LLM clients, and exposes the two composite operations:
retrieve (decompose, coarse scan, rerank) and evaluate (retrieve every
manifest query and aggregate metrics). In fixture mode everything is
hermetic and responses are byte-deterministic, including zeroed stage
timings; live mode reports real latencies.
"""
from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .bench import Benchmark, gt_mask_table, load_benchmark, load_mask_table
from .canon import canonical_json
from .decompose import (FixtureLlmClient, LlmClient, RemoteLlmClient, SubQuery,
                        decompose, embed_subqueries)
from .embedding import (DEFAULT_DIM, EmbeddingProvider, HashingProvider,
                        ProjectionHead, RemoteEmbeddingProvider)
from .errors import Rt2vError
from .index import (AggregationSpec, ComponentIndex, build_index, load_index,
                    rank_videos, save_index)
from .metrics import (DEFAULT_K_VALUES, MetricReport, QueryOutcome,
                      compute_report, video_jf)
from .reasoner import FinalRanking, ToolRegistry, rerank
from .relations import RelationConfig, RelationTuple, extract_relations
from .twin import DigitalTwin, serialize_twin

__all__ = ["EngineConfig", "Engine", "EngineError"]

logger = logging.getLogger(__name__)

ENV_EMBED_URL = "RT2V_EMBED_URL"
ENV_LLM_URL = "RT2V_LLM_URL"
ENV_API_KEY = "RT2V_API_KEY"
ENV_FIXTURES = "RT2V_FIXTURES"


class EngineError(Rt2vError):
    """Engine cannot be assembled or serve the request."""


@dataclass
class EngineConfig:
    benchmark_root: Path
    fixtures_dir: Path | None = None
    index_path: Path | None = None
    query_head_path: Path | None = None
    twin_head_path: Path | None = None
    dim: int = DEFAULT_DIM
    k: int = 10
    tau: float = 0.5
    aggregation: str = "weighted_mean"
    max_refinements: int = 2
    metric_k_values: tuple[int, ...] = DEFAULT_K_VALUES
    persist_enrichments: bool = False
    relation_config: RelationConfig = field(default_factory=RelationConfig)
    embed_url: str | None = None
    embed_model: str = "default-embedder"
    llm_url: str | None = None
    llm_model: str = "default-reasoner"
    api_key: str | None = None

    def __post_init__(self):
        self.benchmark_root = Path(self.benchmark_root)
        if self.fixtures_dir is not None:
            self.fixtures_dir = Path(self.fixtures_dir)
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau={self.tau} outside [0, 1]")
        if self.k < 1:
            raise ValueError(f"k={self.k} must be positive")

    @property
    def fixture_mode(self) -> bool:
        return self.fixtures_dir is not None

    @classmethod
    def from_env(cls, benchmark_root: Path | str, **overrides) -> "EngineConfig":
        """Build a config, folding in the RT2V_* environment variables."""
        env_fixtures = os.environ.get(ENV_FIXTURES)
        defaults = {
            "embed_url": os.environ.get(ENV_EMBED_URL),
            "llm_url": os.environ.get(ENV_LLM_URL),
            "api_key": os.environ.get(ENV_API_KEY),
            "fixtures_dir": Path(env_fixtures) if env_fixtures else None,
        }
        defaults.update({k: v for k, v in overrides.items() if v is not None})
        return cls(benchmark_root=Path(benchmark_root), **defaults)


class Engine:
    def __init__(self, config: EngineConfig, benchmark: Benchmark,
                 relations: Mapping[str, list[RelationTuple]],
                 index: ComponentIndex, provider: EmbeddingProvider,
                 query_head: ProjectionHead, twin_head: ProjectionHead,
                 llm: LlmClient, tools: ToolRegistry):
        self.config = config
        self.benchmark = benchmark
        self.relations = dict(relations)
        self.index = index
        self.provider = provider
        self.query_head = query_head
        self.twin_head = twin_head
        self.llm = llm
        self.tools = tools

    @classmethod
    def load(cls, config: EngineConfig) -> "Engine":
        """Assemble every stage from a config; validates the benchmark."""
        benchmark = load_benchmark(config.benchmark_root)
        relations = {vid: extract_relations(twin, config.relation_config)
                     for vid, twin in benchmark.twins.items()}

        if config.embed_url and not config.fixture_mode:
            provider: EmbeddingProvider = RemoteEmbeddingProvider(
                config.embed_url, config.embed_model, dim=config.dim,
                api_key=config.api_key)
        else:
            provider = HashingProvider(config.dim)

        query_head = (ProjectionHead.load(config.query_head_path)
                      if config.query_head_path else ProjectionHead.identity(config.dim))
        twin_head = (ProjectionHead.load(config.twin_head_path)
                     if config.twin_head_path else ProjectionHead.identity(config.dim))

        if config.index_path and Path(config.index_path).is_file():
            index = load_index(config.index_path)
            if index.dim != config.dim:
                raise EngineError(
                    f"index dim {index.dim} does not match configured dim {config.dim}")
            if index.meta.get("provider_id") != provider.provider_id:
                logger.warning("index built with provider %r, running with %r",
                               index.meta.get("provider_id"), provider.provider_id)
            if index.meta.get("twin_head_version") != twin_head.version:
                logger.warning(
                    "index built with twin head %r, configured head is %r; "
                    "rebuild the index after retraining",
                    index.meta.get("twin_head_version"), twin_head.version)
        else:
            index = build_index(benchmark.twins, relations, provider, twin_head)
            if config.index_path:
                save_index(index, config.index_path)

        if config.fixture_mode:
            llm: LlmClient = FixtureLlmClient(config.fixtures_dir)
        elif config.llm_url:
            llm = RemoteLlmClient(config.llm_url, config.llm_model,
                                  api_key=config.api_key)
        else:
            raise EngineError(
                f"no language model available: set {ENV_FIXTURES} or {ENV_LLM_URL}")

        return cls(config, benchmark, relations, index, provider, query_head,
                   twin_head, llm, ToolRegistry.default())

    def _persist_twin(self, video_id: str, twin: DigitalTwin) -> None:
        self.benchmark.twins[video_id] = twin
        path = self.config.benchmark_root / "twins" / f"{video_id}.json"
        path.write_text(serialize_twin(twin) + "\n", encoding="utf-8")
        logger.info("persisted enriched twin for %s", video_id)

    def _run_query(self, query: str, k: int, tau: float,
                   aggregation: str) -> tuple[list[SubQuery], FinalRanking, dict]:
        deterministic = self.config.fixture_mode
        timings: dict[str, float] = {}

        started = time.perf_counter()
        subqueries = decompose(query, self.llm)
        timings["decompose"] = 0.0 if deterministic else (
            (time.perf_counter() - started) * 1000.0)

        started = time.perf_counter()
        vecs = embed_subqueries(subqueries, self.provider, self.query_head)
        agg = AggregationSpec(mode=aggregation,
                              weights=tuple(sq.weight for sq in subqueries))
        ranking = rank_videos(self.index, vecs, agg)
        timings["coarse"] = 0.0 if deterministic else (
            (time.perf_counter() - started) * 1000.0)

        started = time.perf_counter()
        on_enriched = self._persist_twin if self.config.persist_enrichments else None
        final = rerank(query, subqueries, ranking, k, self.benchmark.twins,
                       self.llm, self.tools, tau=tau,
                       max_refinements=self.config.max_refinements,
                       on_enriched=on_enriched)
        timings["rerank"] = 0.0 if deterministic else (
            (time.perf_counter() - started) * 1000.0)
        return subqueries, final, timings

    def retrieve(self, query: str, k: int | None = None, tau: float | None = None,
                 aggregation: str | None = None) -> dict:
        """Full two-stage retrieval; returns the response object."""
        if not query or not query.strip():
            raise ValueError("query text is empty")
        k = self.config.k if k is None else k
        tau = self.config.tau if tau is None else tau
        aggregation = aggregation or self.config.aggregation
        if not 0.0 <= tau <= 1.0:
            raise ValueError(f"tau={tau} outside [0, 1]")
        if k < 1:
            raise ValueError(f"k={k} must be positive")
        subqueries, final, timings = self._run_query(query, k, tau, aggregation)
        return {
            "query": query,
            "k": k,
            "tau": tau,
            "aggregation": aggregation,
            "subqueries": [
                {"text": sq.text, "kind": sq.kind, "weight": sq.weight}
                for sq in subqueries
            ],
            "entries": [entry.to_obj() for entry in final.entries],
            "warnings": list(final.warnings),
            "timings_ms": timings,
        }

    def retrieve_bytes(self, query: str, k: int | None = None,
                       tau: float | None = None,
                       aggregation: str | None = None) -> bytes:
        """Canonical response bytes: the CLI/service parity surface."""
        return canonical_json(self.retrieve(query, k, tau, aggregation)).encode("utf-8")

    def evaluate(self) -> MetricReport:
        """Run every manifest query and aggregate rank and mask metrics."""
        if not self.benchmark.queries:
            raise EngineError("benchmark has no queries to evaluate")
        outcomes = []
        for entry in self.benchmark.queries:
            subqueries, final, _ = self._run_query(
                entry.text, self.config.k, self.config.tau, self.config.aggregation)
            rank = final.rank_of(entry.gt_video_id)
            ranked_entry = next(e for e in final.entries
                                if e.video_id == entry.gt_video_id)
            pred_masks = load_mask_table(self.benchmark.root, dict(ranked_entry.masks))
            gt_masks = gt_mask_table(self.benchmark, entry)
            j, f = video_jf(pred_masks, gt_masks)
            outcomes.append(QueryOutcome(entry.query_id, rank, j, f))
        return compute_report(outcomes, self.config.metric_k_values)

    # Read surfaces for the HTTP service.

    def twin_text(self, video_id: str) -> str:
        twin = self.benchmark.twins.get(video_id)
        if twin is None:
            raise KeyError(f"unknown video {video_id!r}")
        return serialize_twin(twin)

    def mask_text(self, video_id: str, instance_id: int, frame_index: int) -> str:
        twin = self.benchmark.twins.get(video_id)
        if twin is None:
            raise KeyError(f"unknown video {video_id!r}")
        for frame in twin.frames:
            if frame.frame_index != frame_index:
                continue
            for inst in frame.instances:
                if inst.instance_id == instance_id:
                    path = self.config.benchmark_root / inst.mask_ref
                    return path.read_text(encoding="ascii")
        raise KeyError(f"no mask for video {video_id!r} instance {instance_id} "
                       f"frame {frame_index}")

    def health(self) -> dict:
        return {
            "status": "ok",
            "videos": len(self.benchmark.twins),
            "index_components": len(self.index),
            "provider_id": self.provider.provider_id,
            "query_head_version": self.query_head.version,
            "twin_head_version": self.twin_head.version,
        }
