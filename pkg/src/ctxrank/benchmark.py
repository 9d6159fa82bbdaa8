"""Scoring-throughput measurement: by document length and by encoder depth.

Timing wraps only the scoring calls (one perf_counter pair per pass), a
warm-up pass is excluded, and the median over repetitions is reported so
scheduler noise does not skew results. Throughput counts documents, not
segments. Scoring runs under no_grad and never touches parameters.
"""

from __future__ import annotations

import os
import statistics
import time
from dataclasses import dataclass

import numpy as np
import torch

from .evaluation import MetricSpec, RerankConfig
from .pipeline import ScoringPipeline, score_document
from .text_pipeline import TokenizedText
from .training import TrainConfig, TrainData, make_validator, train


@dataclass(frozen=True)
class ThroughputRow:
    length: int
    docs_per_second: float


@dataclass(frozen=True)
class LayerRow:
    layers: int
    metric: float
    docs_per_second: float


def time_batch(score_fn, items, repetitions: int = 3) -> float:
    """Median seconds for one full pass over `items`, after one warm-up pass."""
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    for item in items:
        score_fn(item)
    elapsed = []
    for _ in range(repetitions):
        start = time.perf_counter()
        for item in items:
            score_fn(item)
        elapsed.append(time.perf_counter() - start)
    return statistics.median(elapsed)


def synthetic_docs(pipeline: ScoringPipeline, length: int, count: int, seed: int = 0) -> list[TokenizedText]:
    """Deterministic token sequences drawn from the pipeline's vocabulary."""
    tokens = pipeline.vocab.tokens()
    if not tokens:
        raise ValueError("pipeline vocabulary is empty")
    rng = np.random.default_rng(seed)
    docs = []
    for _ in range(count):
        picks = rng.integers(0, len(tokens), size=length)
        surface = tuple(tokens[i] for i in picks)
        docs.append(TokenizedText(surface, tuple(pipeline.vocab.id_of(t) for t in surface)))
    return docs


def throughput_by_length(
    pipeline: ScoringPipeline,
    lengths: list[int],
    docs_per_point: int = 8,
    repetitions: int = 3,
    query_text: str | None = None,
    seed: int = 0,
) -> list[ThroughputRow]:
    """Median documents/second at each document length."""
    if query_text is None:
        query_text = " ".join(pipeline.vocab.tokens()[:4]) or "query"
    query = pipeline.prepare_query(query_text)
    rows = []
    for length in lengths:
        docs = synthetic_docs(pipeline, length, docs_per_point, seed)
        docs = [doc.slice(0, min(length, pipeline.doc_token_limit)) for doc in docs]

        def score(doc):
            with torch.no_grad():
                score_document(pipeline.head, query, doc, pipeline.contextualizer)

        seconds = time_batch(score, docs, repetitions)
        rows.append(ThroughputRow(length, docs_per_point / seconds if seconds > 0 else float("inf")))
    return rows


@dataclass
class LayerSweepBundle:
    """Data and settings for one quality-vs-depth sweep point."""

    data: TrainData
    train_cfg: TrainConfig
    metric: MetricSpec
    rerank_cutoff: int = 150
    bench_doc_length: int = 200
    docs_per_point: int = 8
    repetitions: int = 3


def quality_vs_layers(
    pipeline_factory,
    layer_counts: list[int],
    bundle: LayerSweepBundle,
    out_dir: str | os.PathLike,
) -> list[LayerRow]:
    """Train and evaluate with only the first `a` encoder layers, for each a.

    `pipeline_factory(active_layers)` must return a fresh untrained
    pipeline restricted to that layer prefix. Reports the best validation
    metric and the trained model's throughput at `bench_doc_length`.
    """
    rows = []
    for layers in layer_counts:
        pipeline = pipeline_factory(layers)
        validator = make_validator(bundle.data, bundle.metric, RerankConfig(cutoff=bundle.rerank_cutoff))
        run_dir = os.path.join(out_dir, f"layers-{layers}")
        result = train(pipeline, bundle.data, bundle.train_cfg, validator, run_dir)
        best = ScoringPipeline.load(result.best_path)
        rate = throughput_by_length(
            best,
            [bundle.bench_doc_length],
            docs_per_point=bundle.docs_per_point,
            repetitions=bundle.repetitions,
        )[0].docs_per_second
        rows.append(LayerRow(layers, result.best_metric, rate))
    return rows


def write_tsv(rows, header: list[str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(_fmt(v) for v in _astuple(row)) + "\n")


def write_gnuplot(rows, header: list[str], path) -> None:
    """Whitespace-separated columns with a comment header."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for row in rows:
            fh.write(" ".join(_fmt(v) for v in _astuple(row)) + "\n")


def _astuple(row):
    if hasattr(row, "__dataclass_fields__"):
        return tuple(getattr(row, f) for f in row.__dataclass_fields__)
    return tuple(row)


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)
