"""Re-ranking with a trained model and rank-quality metrics.

Conventions (all standard TREC tooling behavior, stated here because the
metrics themselves admit variants): unjudged documents count as
non-relevant; negative grades count as 0 gain; nDCG uses linear gain by
default (exponential available); a query with no relevant judgments
scores 0 and still enters the mean; queries judged but absent from a run
contribute 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from scipy import stats

from .data_io import DocRecord, RunEntry, rank_candidates
from .errors import DataError


@dataclass(frozen=True)
class RerankConfig:
    cutoff: int = 150
    batch_size: int = 16

    def __post_init__(self):
        if self.cutoff < 1 or self.batch_size < 1:
            raise ValueError("cutoff and batch_size must be positive")


@dataclass(frozen=True)
class MetricSpec:
    name: str  # P | nDCG | ERR
    depth: int
    max_grade: int | None = None  # ERR only; None = derive from qrels
    exponential_gain: bool = False  # nDCG only

    def __post_init__(self):
        if self.name not in ("P", "nDCG", "ERR"):
            raise ValueError(f"unknown metric {self.name!r}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.max_grade is not None and self.max_grade < 1:
            raise ValueError("max_grade must be >= 1")

    @property
    def label(self) -> str:
        return f"{self.name}_{self.depth}"

    @classmethod
    def parse(cls, text: str) -> "MetricSpec":
        """Parse 'P@20' / 'nDCG@20' / 'ERR@20' (names case-insensitive)."""
        if "@" not in text:
            raise ValueError(f"metric must look like NAME@DEPTH, got {text!r}")
        name, _, depth = text.partition("@")
        canonical = {"p": "P", "ndcg": "nDCG", "err": "ERR"}.get(name.strip().lower())
        if canonical is None:
            raise ValueError(f"unknown metric name {name!r}")
        return cls(canonical, int(depth))


def rerank(
    model,
    query,
    candidates: list[RunEntry],
    corpus: dict[str, DocRecord],
    cutoff: int = 150,
    tag: str = "ctxrank",
) -> list[RunEntry]:
    """Re-score the top-`cutoff` candidates for one query with `model`.

    `model` needs a `score_text(query_text, doc_text) -> float` method.
    Output is sorted by score descending (ties: doc_id descending) with
    ranks reassigned from 1; candidates beyond the cutoff are not scored
    and not emitted.
    """
    head = candidates[:cutoff]
    scored = []
    for entry in head:
        doc = corpus.get(entry.doc_id)
        if doc is None:
            raise DataError(f"candidate doc {entry.doc_id!r} not found in corpus")
        scored.append((entry.doc_id, model.score_text(query.text, doc.text)))
    return rank_candidates(scored, query.query_id, tag)


def rerank_run(
    model,
    topics: dict,
    candidates: dict[str, list[RunEntry]],
    corpus: dict[str, DocRecord],
    cfg: RerankConfig = RerankConfig(),
    tag: str = "ctxrank",
) -> dict[str, list[RunEntry]]:
    """Re-rank every candidate query that has a topic."""
    out: dict[str, list[RunEntry]] = {}
    for query_id in sorted(candidates):
        topic = topics.get(query_id)
        if topic is None:
            raise DataError(f"candidate query {query_id!r} has no topic text")
        out[query_id] = rerank(model, topic, candidates[query_id], corpus, cfg.cutoff, tag)
    return out


# -- per-query metrics ----------------------------------------------------


def precision_at(run: list[RunEntry], qrels: dict[str, int], depth: int) -> float:
    """Fraction of the top `depth` ranks holding a grade > 0 document."""
    hits = sum(1 for e in run[:depth] if qrels.get(e.doc_id, 0) > 0)
    return hits / depth


def _gain(grade: int, exponential: bool) -> float:
    grade = max(grade, 0)
    return float(2**grade - 1) if exponential else float(grade)


def ndcg_at(
    run: list[RunEntry],
    qrels: dict[str, int],
    depth: int,
    exponential_gain: bool = False,
) -> float:
    """DCG@depth / ideal-DCG@depth with log2(rank+1) discounts.

    Returns 0 for queries without any relevant judgment.
    """
    ideal_gains = sorted((_gain(g, exponential_gain) for g in qrels.values()), reverse=True)
    idcg = sum(g / math.log2(i + 2) for i, g in enumerate(ideal_gains[:depth]))
    if idcg == 0.0:
        return 0.0
    dcg = sum(
        _gain(qrels.get(e.doc_id, 0), exponential_gain) / math.log2(i + 2)
        for i, e in enumerate(run[:depth])
    )
    return dcg / idcg


def err_at(run: list[RunEntry], qrels: dict[str, int], depth: int, max_grade: int) -> float:
    """Expected reciprocal rank with stop probability (2^g - 1) / 2^max_grade."""
    if max_grade < 1:
        raise ValueError("max_grade must be >= 1")
    err = 0.0
    continue_prob = 1.0
    for i, entry in enumerate(run[:depth], start=1):
        grade = max(qrels.get(entry.doc_id, 0), 0)
        stop = (2**grade - 1) / (2**max_grade)
        err += continue_prob * stop / i
        continue_prob *= 1.0 - stop
    return err


def global_max_grade(qrels: dict[str, dict[str, int]]) -> int:
    """Largest grade in the full qrels, floored at 1 (ERR normalization)."""
    top = max((g for per_query in qrels.values() for g in per_query.values()), default=1)
    return max(top, 1)


def per_query_metric(
    run: dict[str, list[RunEntry]],
    qrels: dict[str, dict[str, int]],
    spec: MetricSpec,
) -> dict[str, float]:
    """Metric per judged query; queries missing from the run score 0."""
    max_grade = spec.max_grade if spec.max_grade is not None else global_max_grade(qrels)
    values: dict[str, float] = {}
    for query_id in sorted(qrels):
        entries = run.get(query_id, [])
        judgments = qrels[query_id]
        if spec.name == "P":
            values[query_id] = precision_at(entries, judgments, spec.depth)
        elif spec.name == "nDCG":
            values[query_id] = ndcg_at(entries, judgments, spec.depth, spec.exponential_gain)
        else:
            values[query_id] = err_at(entries, judgments, spec.depth, max_grade)
    return values


def evaluate_run(
    run: dict[str, list[RunEntry]],
    qrels: dict[str, dict[str, int]],
    specs: list[MetricSpec],
) -> dict[str, float]:
    """Arithmetic mean of each metric over all judged queries."""
    out: dict[str, float] = {}
    for spec in specs:
        values = per_query_metric(run, qrels, spec)
        out[spec.label] = sum(values.values()) / len(values) if values else 0.0
    return out


def paired_t_test(per_query_a: list[float], per_query_b: list[float]) -> float:
    """Two-sided paired t-test p-value over per-query metric values.

    Degenerate variance is mapped to the conventional limits: identical
    lists give p = 1.0, a constant non-zero difference gives p = 0.0.
    """
    if len(per_query_a) != len(per_query_b):
        raise ValueError(f"paired lists differ in length: {len(per_query_a)} vs {len(per_query_b)}")
    if len(per_query_a) < 2:
        raise ValueError("need at least 2 paired observations")
    diffs = [a - b for a, b in zip(per_query_a, per_query_b)]
    n = len(diffs)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        return 1.0 if mean == 0.0 else 0.0
    t = mean / math.sqrt(var / n)
    return 2.0 * float(stats.t.sf(abs(t), df=n - 1))
