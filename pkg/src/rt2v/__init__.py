"""Reasoning text-to-video retrieval over digital-twin scene documents.

Pipeline: parse twin JSON, extract spatial relations, render object and
relation components to text, embed with a hashing provider plus learned
projection heads, retrieve top candidates by compositional score, then
rerank with an LLM reasoner that can refine twins through a tool registry.
"""
from .bench import Benchmark, SyntheticSpec, generate_synthetic, load_benchmark
from .canon import canonical_json, canonical_json_bytes
from .decompose import (FixtureLlmClient, RemoteLlmClient, ScriptedLlmClient,
                        SubQuery, decompose, embed_subqueries)
from .embedding import (EmbeddingProvider, HashingProvider, ProjectionHead,
                        RemoteEmbeddingProvider, apply_projection, hash_embed)
from .engine import Engine, EngineConfig
from .errors import (BenchmarkError, DecompositionError, PlanError,
                     ProviderError, RleError, Rt2vError, ToolTimeoutError,
                     TrainingDivergedError, TwinInvariantError, TwinParseError,
                     TwinSchemaError, UnknownVideoError)
from .index import (AggregationSpec, ComponentIndex, build_index,
                    compositional_score, load_index, rank_videos,
                    retrieve_topk, save_index)
from .masks import MaskBitmap, read_mask, rle_decode, rle_encode, write_mask
from .metrics import (MetricReport, QueryOutcome, compute_report,
                      contour_accuracy, mean_ap, mean_rank, median_rank,
                      recall_at_k, region_similarity, video_jf)
from .reasoner import (FinalRanking, RankedEntry, ToolRegistry, rerank,
                       run_plan)
from .relations import RelationConfig, RelationTuple, extract_relations
from .rendering import render_object_text, render_relation_text
from .retrieval import CompositionalRetriever
from .server import create_app
from .training import (ContrastiveHeadTrainer, TrainConfig, TrainingDataset,
                       TrainingExample, mine_examples, nce_loss, train_heads)
from .twin import DigitalTwin, parse_twin, serialize_twin, validate_twin

__version__ = "0.1.0"

__all__ = [
    "AggregationSpec",
    "Benchmark",
    "BenchmarkError",
    "ComponentIndex",
    "CompositionalRetriever",
    "ContrastiveHeadTrainer",
    "DecompositionError",
    "DigitalTwin",
    "EmbeddingProvider",
    "Engine",
    "EngineConfig",
    "FinalRanking",
    "FixtureLlmClient",
    "HashingProvider",
    "MaskBitmap",
    "MetricReport",
    "PlanError",
    "ProjectionHead",
    "ProviderError",
    "QueryOutcome",
    "RankedEntry",
    "RelationConfig",
    "RelationTuple",
    "RemoteEmbeddingProvider",
    "RemoteLlmClient",
    "RleError",
    "Rt2vError",
    "ScriptedLlmClient",
    "SubQuery",
    "SyntheticSpec",
    "ToolRegistry",
    "ToolTimeoutError",
    "TrainConfig",
    "TrainingDataset",
    "TrainingDivergedError",
    "TrainingExample",
    "TwinInvariantError",
    "TwinParseError",
    "TwinSchemaError",
    "UnknownVideoError",
    "apply_projection",
    "build_index",
    "canonical_json",
    "canonical_json_bytes",
    "compositional_score",
    "compute_report",
    "contour_accuracy",
    "create_app",
    "decompose",
    "embed_subqueries",
    "extract_relations",
    "generate_synthetic",
    "hash_embed",
    "load_benchmark",
    "load_index",
    "mean_ap",
    "mean_rank",
    "median_rank",
    "mine_examples",
    "nce_loss",
    "parse_twin",
    "rank_videos",
    "read_mask",
    "recall_at_k",
    "region_similarity",
    "rerank",
    "render_object_text",
    "render_relation_text",
    "retrieve_topk",
    "rle_decode",
    "rle_encode",
    "run_plan",
    "save_index",
    "serialize_twin",
    "train_heads",
    "validate_twin",
    "video_jf",
    "write_mask",
]
