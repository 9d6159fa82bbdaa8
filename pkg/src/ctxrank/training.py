"""Pairwise training: sampling, losses, and the optimization loop.

Positives are judged-relevant documents that also appear inside the
candidate run's re-ranking cutoff (anything the first stage would never
surface cannot be re-ranked, so it cannot teach the model); every other
judged document for the query is a negative. Pairs are drawn uniformly
with replacement.

Optimization is Adam with two learning rates -- one for head parameters,
one for encoder parameters -- and gradient accumulation in fixed-size
chunks whose summed gradient equals the full-batch gradient up to
floating-point associativity. After every epoch a validator re-ranks
held-out candidates; the checkpoint with the best validation metric wins
(ties go to the earlier epoch).
"""

from __future__ import annotations

import math
import os
import random
from dataclasses import dataclass, field

import torch

from .data_io import RunEntry
from .pipeline import ScoringPipeline
from .text_pipeline import TokenizedText


@dataclass(frozen=True)
class TrainingPair:
    query_id: str
    pos_doc_id: str
    neg_doc_id: str

    def __post_init__(self):
        if self.pos_doc_id == self.neg_doc_id:
            raise ValueError(f"degenerate pair for query {self.query_id!r}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batches_per_epoch: int = 32
    pairs_per_batch: int = 16
    lr_head: float = 1e-3
    lr_encoder: float = 2e-5
    rerank_cutoff_train: int = 150
    grad_accum_chunk: int = 16
    seed: int = 42
    loss: str = "hinge"  # hinge | cross_entropy

    def __post_init__(self):
        for name in ("epochs", "batches_per_epoch", "pairs_per_batch", "rerank_cutoff_train", "grad_accum_chunk"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr_head <= 0 or self.lr_encoder <= 0:
            raise ValueError("learning rates must be positive")
        if self.pairs_per_batch % self.grad_accum_chunk != 0:
            raise ValueError(
                f"grad_accum_chunk ({self.grad_accum_chunk}) must divide "
                f"pairs_per_batch ({self.pairs_per_batch})"
            )
        if self.loss not in ("hinge", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")


def hinge_loss(score_pos: torch.Tensor, score_neg: torch.Tensor) -> torch.Tensor:
    """max(0, 1 - score_pos + score_neg)."""
    margin = 1.0 - score_pos + score_neg
    return torch.clamp(margin, min=0.0)


def pairwise_cross_entropy(score_pos: torch.Tensor, score_neg: torch.Tensor) -> torch.Tensor:
    """-log softmax(pos | {pos, neg}) = softplus(neg - pos)."""
    return torch.nn.functional.softplus(score_neg - score_pos)


LOSSES = {"hinge": hinge_loss, "cross_entropy": pairwise_cross_entropy}


def trainable_queries(
    qrels: dict[str, dict[str, int]],
    candidates: dict[str, list[RunEntry]],
    cutoff: int,
) -> dict[str, tuple[list[str], list[str]]]:
    """Per query: (positive doc ids, negative doc ids) under the cutoff rule.

    Queries with no eligible positive or no negative are dropped.
    """
    out: dict[str, tuple[list[str], list[str]]] = {}
    for query_id, judgments in qrels.items():
        in_cutoff = {e.doc_id for e in candidates.get(query_id, [])[:cutoff]}
        positives = sorted(d for d, g in judgments.items() if g > 0 and d in in_cutoff)
        pos_set = set(positives)
        negatives = sorted(d for d in judgments if d not in pos_set)
        if positives and negatives:
            out[query_id] = (positives, negatives)
    return out


def sample_pairs(
    qrels: dict[str, dict[str, int]],
    candidates: dict[str, list[RunEntry]],
    cutoff: int,
    rng: random.Random,
):
    """Infinite uniform-with-replacement stream of TrainingPair."""
    pools = trainable_queries(qrels, candidates, cutoff)
    if not pools:
        raise ValueError("no query has both an in-cutoff positive and a judged negative")
    query_ids = sorted(pools)
    while True:
        query_id = rng.choice(query_ids)
        positives, negatives = pools[query_id]
        yield TrainingPair(query_id, rng.choice(positives), rng.choice(negatives))


@dataclass
class TrainData:
    """Everything the loop needs, already loaded and keyed by id."""

    corpus: dict  # doc_id -> DocRecord
    topics: dict  # query_id -> Topic
    train_qrels: dict
    train_candidates: dict
    valid_qrels: dict
    valid_candidates: dict


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    valid_metric: float


@dataclass
class TrainResult:
    best_epoch: int
    best_metric: float
    best_path: str
    history: list[EpochStats] = field(default_factory=list)


def pair_accuracy(
    pipeline: ScoringPipeline,
    pairs: list[TrainingPair],
    topics: dict,
    corpus: dict,
) -> float:
    """Fraction of pairs where the positive outscores the negative."""
    if not pairs:
        raise ValueError("no pairs to evaluate")
    cache: dict[tuple[str, str], float] = {}

    def score(query_id: str, doc_id: str) -> float:
        key = (query_id, doc_id)
        if key not in cache:
            cache[key] = pipeline.score_text(topics[query_id].text, corpus[doc_id].text)
        return cache[key]

    wins = sum(
        1 for p in pairs if score(p.query_id, p.pos_doc_id) > score(p.query_id, p.neg_doc_id)
    )
    return wins / len(pairs)


def make_validator(data: TrainData, metric, rerank_cfg, tag: str = "valid"):
    """Validator closure: re-rank the validation candidates, return the metric."""
    from .evaluation import evaluate_run, rerank_run

    def validator(pipeline: ScoringPipeline) -> float:
        run = rerank_run(pipeline, data.topics, data.valid_candidates, data.corpus, rerank_cfg, tag)
        return evaluate_run(run, data.valid_qrels, [metric])[metric.label]

    return validator


def train(
    pipeline: ScoringPipeline,
    data: TrainData,
    cfg: TrainConfig,
    validator,
    out_dir: str | os.PathLike,
) -> TrainResult:
    """Run the full loop and return the best checkpoint by validation metric.

    `validator` is called with the pipeline after each epoch and must
    return a scalar metric (higher is better). Checkpoints land in
    `out_dir/epoch-<n>.ckpt` with the winner copied to `out_dir/best.ckpt`;
    per-epoch stats are appended to `out_dir/train.log` as TSV.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = random.Random(cfg.seed)
    torch.manual_seed(cfg.seed)
    pair_stream = sample_pairs(
        data.train_qrels, data.train_candidates, cfg.rerank_cutoff_train, rng
    )

    tokenized_queries: dict[str, TokenizedText] = {}
    tokenized_docs: dict[str, TokenizedText] = {}

    def query_tokens(query_id: str) -> TokenizedText:
        if query_id not in tokenized_queries:
            tokenized_queries[query_id] = pipeline.prepare_query(data.topics[query_id].text)
        return tokenized_queries[query_id]

    def doc_tokens(doc_id: str) -> TokenizedText:
        if doc_id not in tokenized_docs:
            tokenized_docs[doc_id] = pipeline.prepare_doc(data.corpus[doc_id].text)
        return tokenized_docs[doc_id]

    param_groups = [{"params": pipeline.head_parameters(), "lr": cfg.lr_head}]
    encoder_params = pipeline.encoder_parameters()
    if encoder_params:
        param_groups.append({"params": encoder_params, "lr": cfg.lr_encoder})
    optimizer = torch.optim.Adam(param_groups, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    loss_fn = LOSSES[cfg.loss]

    best_epoch, best_metric = -1, -math.inf
    history: list[EpochStats] = []
    log_path = os.path.join(out_dir, "train.log")
    with open(log_path, "w", encoding="utf-8") as log:
        log.write("epoch\tloss_mean\tvalid_metric\n")
        for epoch in range(1, cfg.epochs + 1):
            epoch_loss = 0.0
            for batch in range(cfg.batches_per_epoch):
                optimizer.zero_grad()
                batch_pairs = [next(pair_stream) for _ in range(cfg.pairs_per_batch)]
                for start in range(0, cfg.pairs_per_batch, cfg.grad_accum_chunk):
                    chunk = batch_pairs[start : start + cfg.grad_accum_chunk]
                    try:
                        chunk_loss = None
                        for pair in chunk:
                            q = query_tokens(pair.query_id)
                            pos = pipeline.score_tokenized(q, doc_tokens(pair.pos_doc_id)).score
                            neg = pipeline.score_tokenized(q, doc_tokens(pair.neg_doc_id)).score
                            loss = loss_fn(pos, neg)
                            chunk_loss = loss if chunk_loss is None else chunk_loss + loss
                        scaled = chunk_loss / cfg.pairs_per_batch
                        if not bool(torch.isfinite(scaled)):
                            raise FloatingPointError("non-finite loss")
                    except FloatingPointError as exc:
                        raise FloatingPointError(
                            f"{exc} at epoch {epoch}, batch {batch + 1}"
                        ) from None
                    scaled.backward()
                    epoch_loss += scaled.item() * cfg.pairs_per_batch
                optimizer.step()
            mean_loss = epoch_loss / (cfg.batches_per_epoch * cfg.pairs_per_batch)

            metric = float(validator(pipeline))
            ckpt_path = os.path.join(out_dir, f"epoch-{epoch}.ckpt")
            pipeline.save(ckpt_path)
            history.append(EpochStats(epoch, mean_loss, metric))
            log.write(f"{epoch}\t{mean_loss:.6f}\t{metric:.6f}\n")
            log.flush()
            if metric > best_metric:
                best_epoch, best_metric = epoch, metric

    best_path = os.path.join(out_dir, "best.ckpt")
    with open(os.path.join(out_dir, f"epoch-{best_epoch}.ckpt"), "rb") as src:
        payload = src.read()
    with open(best_path, "wb") as dst:
        dst.write(payload)
    return TrainResult(best_epoch, best_metric, best_path, history)
