"""Command-line interface: one verb per pipeline stage.

Exit codes: 0 success, 1 pipeline error (structured JSON on stderr),
2 usage error.
"""
from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click

from .bench import SyntheticSpec, generate_synthetic, load_benchmark
from .canon import canonical_json, write_canonical
from .decompose import decompose
from .embedding import HashingProvider, ProjectionHead
from .engine import Engine, EngineConfig
from .errors import Rt2vError
from .index import build_index, save_index
from .relations import extract_relations
from .training import TrainConfig, mine_examples, train_heads
from .twin import serialize_twin

logger = logging.getLogger(__name__)


def _pipeline_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except click.ClickException:
            raise
        except Rt2vError as exc:
            click.echo(canonical_json({"error": type(exc).__name__,
                                       "message": str(exc)}), err=True)
            sys.exit(1)
    return wrapper


def _engine_options(fn):
    for option in reversed([
        click.option("--benchmark", "benchmark_root", required=True,
                     type=click.Path(exists=True, file_okay=False, path_type=Path),
                     help="Benchmark root directory."),
        click.option("--fixtures", "fixtures_dir", envvar="RT2V_FIXTURES",
                     type=click.Path(file_okay=False, path_type=Path),
                     help="Fixture directory (hermetic mode). Defaults to "
                          "$RT2V_FIXTURES, else <benchmark>/fixtures when present."),
        click.option("--index", "index_path", type=click.Path(path_type=Path),
                     help="Component index file; built on the fly when absent."),
        click.option("--heads-dir", type=click.Path(file_okay=False, path_type=Path),
                     help="Directory with query_head.json and twin_head.json."),
        click.option("--k", type=int, default=10, show_default=True,
                     help="Coarse candidates handed to the reranker."),
        click.option("--tau", type=float, default=0.5, show_default=True,
                     help="Relevance threshold for the verified tier."),
        click.option("--agg", type=click.Choice(["weighted_mean", "min"]),
                     default="weighted_mean", show_default=True,
                     help="Sub-query aggregation mode."),
    ]):
        fn = option(fn)
    return fn


def _build_config(benchmark_root: Path, fixtures_dir: Path | None,
                  index_path: Path | None, heads_dir: Path | None,
                  k: int, tau: float, agg: str, **extra) -> EngineConfig:
    if fixtures_dir is None and (benchmark_root / "fixtures").is_dir():
        fixtures_dir = benchmark_root / "fixtures"
    query_head = twin_head = None
    if heads_dir is not None:
        query_head = heads_dir / "query_head.json"
        twin_head = heads_dir / "twin_head.json"
    return EngineConfig.from_env(
        benchmark_root, fixtures_dir=fixtures_dir, index_path=index_path,
        query_head_path=query_head, twin_head_path=twin_head,
        k=k, tau=tau, aggregation=agg, **extra)


@click.group()
@click.option("--verbose", is_flag=True, help="Log at DEBUG level.")
def main(verbose: bool):
    """Reasoning text-to-video retrieval over digital-twin documents."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--benchmark", "benchmark_root", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--write", is_flag=True,
              help="Rewrite twin files in canonical form after validation.")
@_pipeline_errors
def ingest(benchmark_root: Path, write: bool):
    """Validate a benchmark's twin documents (optionally canonicalize)."""
    benchmark = load_benchmark(benchmark_root)
    if write:
        for video_id, twin in sorted(benchmark.twins.items()):
            path = benchmark_root / "twins" / f"{video_id}.json"
            path.write_text(serialize_twin(twin) + "\n", encoding="utf-8")
    click.echo(canonical_json({
        "videos": len(benchmark.twins),
        "queries": len(benchmark.queries),
        "normalized": bool(write),
    }))


@main.command()
@click.option("--benchmark", "benchmark_root", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path),
              help="Write relation tuples as canonical JSON.")
@_pipeline_errors
def relate(benchmark_root: Path, out: Path | None):
    """Extract spatial relation tuples for every video."""
    benchmark = load_benchmark(benchmark_root)
    relations = {
        vid: [
            {"subject_id": r.subject_id, "object_id": r.object_id,
             "predicate": r.predicate, "support": r.support}
            for r in extract_relations(twin)
        ]
        for vid, twin in sorted(benchmark.twins.items())
    }
    if out is not None:
        write_canonical(out, relations)
    click.echo(canonical_json({
        "videos": len(relations),
        "tuples": sum(len(v) for v in relations.values()),
    }))


@main.command("index")
@click.option("--benchmark", "benchmark_root", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--out", required=True, type=click.Path(dir_okay=False, path_type=Path))
@click.option("--heads-dir", type=click.Path(file_okay=False, path_type=Path))
@click.option("--dim", type=int, default=256, show_default=True)
@_pipeline_errors
def index_cmd(benchmark_root: Path, out: Path, heads_dir: Path | None, dim: int):
    """Render, embed, and persist the component index."""
    benchmark = load_benchmark(benchmark_root)
    relations = {vid: extract_relations(twin)
                 for vid, twin in benchmark.twins.items()}
    twin_head = (ProjectionHead.load(heads_dir / "twin_head.json")
                 if heads_dir else None)
    index = build_index(benchmark.twins, relations, HashingProvider(dim), twin_head)
    save_index(index, out)
    click.echo(canonical_json({"components": len(index), "out": str(out)}))


@main.command()
@click.option("--benchmark", "benchmark_root", required=True,
              type=click.Path(exists=True, file_okay=False, path_type=Path))
@click.option("--fixtures", "fixtures_dir", envvar="RT2V_FIXTURES",
              type=click.Path(file_okay=False, path_type=Path))
@click.option("--out", "out_dir", required=True,
              type=click.Path(file_okay=False, path_type=Path))
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--batch-size", type=int, default=8, show_default=True)
@click.option("--learning-rate", type=float, default=0.01, show_default=True)
@click.option("--temperature", type=float, default=0.07, show_default=True)
@click.option("--negatives", type=int, default=8, show_default=True,
              help="Negatives sampled per positive.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--dim", type=int, default=256, show_default=True)
@_pipeline_errors
def train(benchmark_root: Path, fixtures_dir: Path | None, out_dir: Path,
          epochs: int, batch_size: int, learning_rate: float, temperature: float,
          negatives: int, seed: int, dim: int):
    """Train projection heads on pairs mined from benchmark ground truth."""
    from .decompose import FixtureLlmClient

    benchmark = load_benchmark(benchmark_root)
    if fixtures_dir is None and (benchmark_root / "fixtures").is_dir():
        fixtures_dir = benchmark_root / "fixtures"
    if fixtures_dir is None:
        raise click.UsageError("training needs --fixtures for decompositions")
    client = FixtureLlmClient(fixtures_dir)
    subqueries = {
        q.query_id: [sq.text for sq in decompose(q.text, client)]
        for q in benchmark.queries
    }
    gt = {q.query_id: q.gt_video_id for q in benchmark.queries}
    relations = {vid: extract_relations(twin)
                 for vid, twin in benchmark.twins.items()}
    provider = HashingProvider(dim)
    probe = build_index(benchmark.twins, relations, provider)
    dataset = mine_examples(subqueries, gt, probe.descriptors,
                            negatives_per_positive=negatives, seed=seed)
    config = TrainConfig(temperature=temperature, learning_rate=learning_rate,
                         epochs=epochs, batch_size=batch_size, seed=seed)
    result = train_heads(dataset, provider, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    result.query_head.save(out_dir / "query_head.json", seed=seed,
                           train_config=config.to_dict())
    result.twin_head.save(out_dir / "twin_head.json", seed=seed,
                          train_config=config.to_dict())
    write_canonical(out_dir / "loss_trace.json", list(result.loss_trace))
    click.echo(canonical_json({
        "examples": len(dataset.examples),
        "epochs": epochs,
        "loss_trace": list(result.loss_trace),
        "out": str(out_dir),
    }))


@main.command()
@click.option("--query", "query_text", required=True, help="Free-text query.")
@_engine_options
@click.option("--persist-enrichments", is_flag=True,
              help="Write enriched twins back to the twin store.")
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path),
              help="Also write the response to a file.")
@_pipeline_errors
def query(query_text: str, benchmark_root: Path, fixtures_dir: Path | None,
          index_path: Path | None, heads_dir: Path | None, k: int, tau: float,
          agg: str, persist_enrichments: bool, out: Path | None):
    """Run one query through decompose, coarse retrieval, and reranking."""
    if not query_text.strip():
        raise click.BadParameter("query text is empty", param_hint="--query")
    config = _build_config(benchmark_root, fixtures_dir, index_path, heads_dir,
                           k, tau, agg, persist_enrichments=persist_enrichments)
    engine = Engine.load(config)
    body = engine.retrieve_bytes(query_text)
    if out is not None:
        out.write_bytes(body + b"\n")
    click.echo(body.decode("utf-8"))


@main.command("eval")
@_engine_options
@click.option("--out", type=click.Path(dir_okay=False, path_type=Path),
              help="Write the metric report as canonical JSON.")
@_pipeline_errors
def eval_cmd(benchmark_root: Path, fixtures_dir: Path | None,
             index_path: Path | None, heads_dir: Path | None, k: int, tau: float,
             agg: str, out: Path | None):
    """Evaluate every manifest query and print the metric table."""
    config = _build_config(benchmark_root, fixtures_dir, index_path, heads_dir,
                           k, tau, agg)
    engine = Engine.load(config)
    report = engine.evaluate()
    if out is not None:
        write_canonical(out, report.to_obj())
    click.echo(report.format_table())


@main.command()
@click.option("--out", required=True,
              type=click.Path(file_okay=False, path_type=Path))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--videos", type=int, default=20, show_default=True,
              help="Total videos, distractors included.")
@click.option("--distractors", type=int, default=10, show_default=True)
@click.option("--queries", type=int, default=10, show_default=True)
@_pipeline_errors
def generate(out: Path, seed: int, videos: int, distractors: int, queries: int):
    """Generate a seeded synthetic benchmark with fixtures."""
    try:
        spec = SyntheticSpec(seed=seed, video_count=videos,
                             distractor_count=distractors, query_count=queries)
    except ValueError as exc:
        raise click.BadParameter(str(exc))
    benchmark = generate_synthetic(spec, out)
    click.echo(canonical_json({
        "root": str(benchmark.root),
        "videos": len(benchmark.twins),
        "queries": len(benchmark.queries),
    }))


@main.command()
@_engine_options
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8080, show_default=True)
@click.option("--persist-enrichments", is_flag=True)
@_pipeline_errors
def serve(benchmark_root: Path, fixtures_dir: Path | None, index_path: Path | None,
          heads_dir: Path | None, k: int, tau: float, agg: str, host: str,
          port: int, persist_enrichments: bool):
    """Serve retrieval over HTTP."""
    import uvicorn

    from .server import create_app

    config = _build_config(benchmark_root, fixtures_dir, index_path, heads_dir,
                           k, tau, agg, persist_enrichments=persist_enrichments)
    engine = Engine.load(config)
    uvicorn.run(create_app(engine), host=host, port=port)


if __name__ == "__main__":
    main()
