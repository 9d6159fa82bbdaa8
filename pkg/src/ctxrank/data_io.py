"""Loaders and writers for all external data files.

Formats (UTF-8, one record per line, blank lines skipped):

  corpus  TSV   doc_id<TAB>text          (tabs inside text become spaces)
  topics  TSV   query_id<TAB>text
  qrels         query_id 0 doc_id grade  (whitespace separated)
  run           query_id Q0 doc_id rank score tag

Loaders are pure, validate eagerly, and raise DataFormatError with the
offending line number; they never skip a malformed record silently.
Returned structures are plain dicts of frozen records, safe to share.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

from .errors import DataFormatError


@dataclass(frozen=True)
class Topic:
    query_id: str
    text: str


@dataclass(frozen=True)
class DocRecord:
    doc_id: str
    text: str


@dataclass(frozen=True)
class QrelRecord:
    query_id: str
    doc_id: str
    grade: int


@dataclass(frozen=True)
class RunEntry:
    query_id: str
    doc_id: str
    rank: int
    score: float
    tag: str


def _lines(path: str | os.PathLike):
    """Yield (line_number, raw_line) for non-blank lines."""
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.strip():
                yield lineno, line


def load_corpus(path: str | os.PathLike) -> dict[str, DocRecord]:
    """Load a TSV corpus into doc_id -> DocRecord.

    Duplicate doc_ids and lines without a tab are hard errors. Text may be
    empty; tabs inside the text column are normalized to single spaces.
    """
    corpus: dict[str, DocRecord] = {}
    for lineno, line in _lines(path):
        if "\t" not in line:
            raise DataFormatError(f"{path}: line {lineno}: expected doc_id<TAB>text")
        doc_id, text = line.split("\t", 1)
        if not doc_id:
            raise DataFormatError(f"{path}: line {lineno}: empty doc_id")
        if doc_id in corpus:
            raise DataFormatError(f"{path}: line {lineno}: duplicate doc_id {doc_id!r}")
        corpus[doc_id] = DocRecord(doc_id, text.replace("\t", " "))
    return corpus


def load_topics(path: str | os.PathLike) -> dict[str, Topic]:
    """Load a TSV topic file into query_id -> Topic. Empty text is an error."""
    topics: dict[str, Topic] = {}
    for lineno, line in _lines(path):
        if "\t" not in line:
            raise DataFormatError(f"{path}: line {lineno}: expected query_id<TAB>text")
        query_id, text = line.split("\t", 1)
        if not query_id:
            raise DataFormatError(f"{path}: line {lineno}: empty query_id")
        if not text.strip():
            raise DataFormatError(f"{path}: line {lineno}: empty query text for {query_id!r}")
        if query_id in topics:
            raise DataFormatError(f"{path}: line {lineno}: duplicate query_id {query_id!r}")
        topics[query_id] = Topic(query_id, text.replace("\t", " "))
    return topics


def load_qrels(path: str | os.PathLike) -> dict[str, dict[str, int]]:
    """Load TREC qrels into query_id -> {doc_id: grade}.

    Grades are integers (negative values preserved). A duplicate
    (query, doc) pair or a non-integer grade is a hard error.
    """
    qrels: dict[str, dict[str, int]] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 4:
            raise DataFormatError(
                f"{path}: line {lineno}: expected 'query_id 0 doc_id grade', got {len(parts)} fields"
            )
        query_id, _, doc_id, grade_str = parts
        try:
            grade = int(grade_str)
        except ValueError:
            raise DataFormatError(
                f"{path}: line {lineno}: non-integer grade {grade_str!r}"
            ) from None
        per_query = qrels.setdefault(query_id, {})
        if doc_id in per_query:
            raise DataFormatError(
                f"{path}: line {lineno}: duplicate judgment for ({query_id!r}, {doc_id!r})"
            )
        per_query[doc_id] = grade
    return qrels


def load_run(path: str | os.PathLike) -> dict[str, list[RunEntry]]:
    """Load a TREC run into query_id -> entries sorted by rank.

    Within each query, ranks must be exactly 1..n (a gap or duplicate rank
    is an error) and scores must be non-increasing with rank.
    """
    per_query: dict[str, dict[int, RunEntry]] = {}
    for lineno, line in _lines(path):
        parts = line.split()
        if len(parts) != 6:
            raise DataFormatError(
                f"{path}: line {lineno}: expected 'query_id Q0 doc_id rank score tag', got {len(parts)} fields"
            )
        query_id, _, doc_id, rank_str, score_str, tag = parts
        try:
            rank = int(rank_str)
            score = float(score_str)
        except ValueError:
            raise DataFormatError(
                f"{path}: line {lineno}: bad rank/score {rank_str!r}/{score_str!r}"
            ) from None
        if rank < 1:
            raise DataFormatError(f"{path}: line {lineno}: rank must be >= 1, got {rank}")
        by_rank = per_query.setdefault(query_id, {})
        if rank in by_rank:
            raise DataFormatError(
                f"{path}: line {lineno}: duplicate rank {rank} for query {query_id!r}"
            )
        by_rank[rank] = RunEntry(query_id, doc_id, rank, score, tag)

    run: dict[str, list[RunEntry]] = {}
    for query_id, by_rank in per_query.items():
        n = len(by_rank)
        ranks = sorted(by_rank)
        if ranks != list(range(1, n + 1)):
            missing = next(r for r in range(1, n + 1) if r not in by_rank)
            raise DataFormatError(
                f"{path}: query {query_id!r}: rank gap at rank {missing}"
            )
        entries = [by_rank[r] for r in ranks]
        for prev, cur in zip(entries, entries[1:]):
            if cur.score > prev.score:
                raise DataFormatError(
                    f"{path}: query {query_id!r}: score/rank inversion at rank {cur.rank} "
                    f"({cur.score} > {prev.score})"
                )
        run[query_id] = entries
    return run


def write_run(run: dict[str, list[RunEntry]], path: str | os.PathLike, tag: str) -> None:
    """Write a run in TREC 6-column format.

    Queries are emitted in ascending lexicographic query_id order; entries
    keep their given ranks; scores are printed with 6 decimal places.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in sorted(run):
            for entry in run[query_id]:
                fh.write(
                    f"{query_id} Q0 {entry.doc_id} {entry.rank} {entry.score:.6f} {tag}\n"
                )


def write_qrels(qrels: dict[str, dict[str, int]], path: str | os.PathLike) -> None:
    """Write qrels in TREC format, sorted by query_id then doc_id."""
    with open(path, "w", encoding="utf-8") as fh:
        for query_id in sorted(qrels):
            for doc_id in sorted(qrels[query_id]):
                fh.write(f"{query_id} 0 {doc_id} {qrels[query_id][doc_id]}\n")


def rank_candidates(scored: list[tuple[str, float]], query_id: str, tag: str) -> list[RunEntry]:
    """Turn (doc_id, score) pairs into a ranked entry list.

    Sorts by score descending; equal scores break by doc_id descending so
    produced runs are identical across platforms.
    """
    ordered = sorted(scored, key=lambda pair: pair[0], reverse=True)
    ordered.sort(key=lambda pair: pair[1], reverse=True)
    return [
        RunEntry(query_id, doc_id, rank, score, tag)
        for rank, (doc_id, score) in enumerate(ordered, start=1)
    ]
