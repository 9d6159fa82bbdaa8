"""Synthetic ranking datasets with a planted term-overlap relevance signal.

Each query gets its own document pool: grade-2 documents contain every
query term (several times), grade-1 documents contain about half of
them, and grade-0 documents contain none. The candidate run orders each
pool by overlap plus a little noise, mimicking a lexical first stage.
Desk-scale stand-in for real collections; deterministic per seed.
"""

from __future__ import annotations

import os
import random
from dataclasses import dataclass

from .data_io import DocRecord, RunEntry, Topic, write_qrels, write_run
from .training import TrainData


@dataclass
class SyntheticDataset:
    corpus: dict[str, DocRecord]
    topics: dict[str, Topic]
    qrels: dict[str, dict[str, int]]
    candidates: dict[str, list[RunEntry]]

    def query_ids(self) -> list[str]:
        return sorted(self.topics)


def make_overlap_dataset(
    n_queries: int = 8,
    docs_per_query: int = 20,
    seed: int = 0,
    query_terms: int = 4,
    doc_length: int = 40,
    vocab_size: int = 120,
) -> SyntheticDataset:
    rng = random.Random(seed)
    vocab = [f"w{i:03d}" for i in range(vocab_size)]

    corpus: dict[str, DocRecord] = {}
    topics: dict[str, Topic] = {}
    qrels: dict[str, dict[str, int]] = {}
    candidates: dict[str, list[RunEntry]] = {}

    n_full = max(docs_per_query // 4, 1)
    n_partial = max(docs_per_query // 4, 1)

    for qi in range(n_queries):
        query_id = f"q{qi:02d}"
        terms = rng.sample(vocab, query_terms)
        filler = [w for w in vocab if w not in terms]
        topics[query_id] = Topic(query_id, " ".join(terms))
        qrels[query_id] = {}
        overlap_score: dict[str, float] = {}

        for dj in range(docs_per_query):
            doc_id = f"d{qi:02d}_{dj:02d}"
            if dj < n_full:
                grade = 2
                inject = terms * 2 + rng.sample(terms, max(query_terms // 2, 1))
            elif dj < n_full + n_partial:
                grade = 1
                inject = rng.sample(terms, max(query_terms // 2, 1))
            else:
                grade = 0
                inject = []
            body = [rng.choice(filler) for _ in range(doc_length - len(inject))]
            for token in inject:
                body.insert(rng.randrange(len(body) + 1), token)
            corpus[doc_id] = DocRecord(doc_id, " ".join(body))
            qrels[query_id][doc_id] = grade
            overlap_score[doc_id] = len(inject) + rng.uniform(0.0, 0.5)

        ordered = sorted(overlap_score, key=lambda d: (-overlap_score[d], d))
        candidates[query_id] = [
            RunEntry(query_id, doc_id, rank, round(overlap_score[doc_id], 6), "firststage")
            for rank, doc_id in enumerate(ordered, start=1)
        ]
        # enforce non-increasing scores after rounding
        fixed = []
        prev = None
        for e in candidates[query_id]:
            score = e.score if prev is None else min(e.score, prev)
            fixed.append(RunEntry(e.query_id, e.doc_id, e.rank, score, e.tag))
            prev = score
        candidates[query_id] = fixed

    return SyntheticDataset(corpus, topics, qrels, candidates)


def split_train_valid(
    dataset: SyntheticDataset, valid_query_ids: list[str]
) -> TrainData:
    """TrainData view with the given queries held out for validation."""
    valid = set(valid_query_ids)
    unknown = valid - set(dataset.topics)
    if unknown:
        raise ValueError(f"unknown validation queries: {sorted(unknown)}")
    train_q = [q for q in dataset.query_ids() if q not in valid]
    if not train_q or not valid:
        raise ValueError("both splits need at least one query")
    return TrainData(
        corpus=dataset.corpus,
        topics=dataset.topics,
        train_qrels={q: dataset.qrels[q] for q in train_q},
        train_candidates={q: dataset.candidates[q] for q in train_q},
        valid_qrels={q: dataset.qrels[q] for q in sorted(valid)},
        valid_candidates={q: dataset.candidates[q] for q in sorted(valid)},
    )


def write_dataset(dataset: SyntheticDataset, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write corpus/topics/qrels/candidates files; returns their paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "corpus": os.path.join(out_dir, "corpus.tsv"),
        "topics": os.path.join(out_dir, "topics.tsv"),
        "qrels": os.path.join(out_dir, "qrels.txt"),
        "candidates": os.path.join(out_dir, "candidates.run"),
    }
    with open(paths["corpus"], "w", encoding="utf-8") as fh:
        for doc_id in sorted(dataset.corpus):
            fh.write(f"{doc_id}\t{dataset.corpus[doc_id].text}\n")
    with open(paths["topics"], "w", encoding="utf-8") as fh:
        for query_id in sorted(dataset.topics):
            fh.write(f"{query_id}\t{dataset.topics[query_id].text}\n")
    write_qrels(dataset.qrels, paths["qrels"])
    write_run(dataset.candidates, paths["candidates"], "firststage")
    return paths
