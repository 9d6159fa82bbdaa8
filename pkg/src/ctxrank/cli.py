"""Command-line entry point.

Subcommands: train, rerank, evaluate, benchmark, export-simmat.
Exit codes: 0 success, 1 usage error, 2 data error. Training is driven
by a flat `key = value` config file; command-line flags override config
values, and the CEDR_SEED environment variable overrides the config seed
(but not an explicit --seed flag).
"""

from __future__ import annotations

import argparse
import math
import os
import random
import sys
import tempfile

import torch

from .benchmark import (
    LayerSweepBundle,
    quality_vs_layers,
    throughput_by_length,
    write_gnuplot,
    write_tsv,
)
from .contextualizer import StaticContextualizer, StubContextualizer
from .data_io import load_corpus, load_qrels, load_run, load_topics, write_run
from .errors import DataError, DataFormatError
from .evaluation import MetricSpec, RerankConfig, evaluate_run, paired_t_test, per_query_metric, rerank_run
from .heads import DrmmConfig, KnrmConfig, PacrrConfig
from .pipeline import ScoringPipeline, build_pipeline, compute_idf_table
from .simtensor import export_layer_csv
from .synthetic import make_overlap_dataset, split_train_valid
from .text_pipeline import Vocabulary
from .training import TrainConfig, TrainData, make_validator, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we map usage to 1
        raise UsageError(f"{self.prog}: {message}")


# -- train config file -------------------------------------------------------

TRAIN_CONFIG_KEYS = {
    "model", "epochs", "batches_per_epoch", "pairs_per_batch", "lr_head",
    "lr_encoder", "rerank_cutoff", "grad_accum_chunk", "seed", "loss",
    "ctx", "layers", "active_layers", "dim", "model_limit", "control_tokens",
    "doc_limit", "valid_metric", "valid_fraction", "valid_queries",
    "static_vectors", "pacrr_idf", "pacrr_k_max", "pacrr_filters",
    "pacrr_ngrams", "pacrr_max_query_len", "threads",
}


def load_train_config(path: str) -> dict[str, str]:
    """Parse flat `key = value` lines; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataFormatError(f"{path}: line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in TRAIN_CONFIG_KEYS:
                raise DataFormatError(f"{path}: line {lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def _cfg(values: dict[str, str], key: str, default, cast):
    if key not in values:
        return default
    try:
        if cast is bool:
            return values[key].lower() in ("1", "true", "yes", "on")
        return cast(values[key])
    except ValueError:
        raise DataFormatError(f"config key {key!r}: cannot parse {values[key]!r}") from None


def _build_contextualizer(values: dict[str, str], vocab: Vocabulary):
    kind = values.get("ctx", "stub")
    dim = _cfg(values, "dim", 32, int)
    model_limit = _cfg(values, "model_limit", 512, int)
    control_tokens = _cfg(values, "control_tokens", 3, int)
    if kind == "stub":
        total = _cfg(values, "layers", 12, int)
        active = _cfg(values, "active_layers", total, int)
        return StubContextualizer(total, active, dim, model_limit, control_tokens)
    if kind == "static":
        table_path = values.get("static_vectors")
        if table_path:
            return StaticContextualizer.from_table_file(table_path, model_limit)
        seed = _cfg(values, "seed", 42, int)
        return StaticContextualizer.from_random(vocab.tokens(), dim, seed, model_limit)
    raise DataFormatError(f"config key 'ctx': unknown kind {kind!r} (adapter models are loaded from checkpoints)")


def _split_validation(query_ids: list[str], values: dict[str, str], seed: int):
    explicit = values.get("valid_queries")
    if explicit:
        valid = [q.strip() for q in explicit.split(",") if q.strip()]
        missing = set(valid) - set(query_ids)
        if missing:
            raise DataFormatError(f"valid_queries not in qrels: {sorted(missing)}")
        return valid
    fraction = _cfg(values, "valid_fraction", 0.25, float)
    if not 0.0 < fraction < 1.0:
        raise DataFormatError("valid_fraction must be in (0, 1)")
    ordered = sorted(query_ids)
    rng = random.Random(seed)
    rng.shuffle(ordered)
    n_valid = min(max(int(math.ceil(fraction * len(ordered))), 1), len(ordered) - 1)
    return sorted(ordered[:n_valid])


def cmd_train(args) -> int:
    values = load_train_config(args.config)
    seed = _cfg(values, "seed", 42, int)
    if "CEDR_SEED" in os.environ:
        try:
            seed = int(os.environ["CEDR_SEED"])
        except ValueError:
            raise DataFormatError(f"CEDR_SEED must be an integer, got {os.environ['CEDR_SEED']!r}") from None
    if args.seed is not None:
        seed = args.seed
    threads = args.threads if args.threads is not None else _cfg(values, "threads", 1, int)
    torch.set_num_threads(threads)

    corpus = load_corpus(args.corpus)
    topics = load_topics(args.topics)
    qrels = load_qrels(args.qrels)
    candidates = load_run(args.candidates)

    vocab = Vocabulary.build(
        [doc.text for doc in corpus.values()] + [t.text for t in topics.values()]
    )
    model_name = args.model or values.get("model", "cedr_knrm")
    contextualizer = _build_contextualizer(values, vocab)

    idf_table = None
    if _cfg(values, "pacrr_idf", False, bool):
        idf_table = compute_idf_table(doc.text for doc in corpus.values())
    pacrr_cfg = PacrrConfig(
        ngram_sizes=tuple(
            int(n) for n in values.get("pacrr_ngrams", "1,2,3").split(",")
        ),
        filters_per_size=_cfg(values, "pacrr_filters", 32, int),
        k_max=_cfg(values, "pacrr_k_max", 30, int),
        max_query_len=_cfg(values, "pacrr_max_query_len", 16, int),
        use_idf=_cfg(values, "pacrr_idf", False, bool),
    )

    torch.manual_seed(seed)
    pipeline = build_pipeline(
        model_name,
        contextualizer,
        vocab,
        doc_token_limit=_cfg(values, "doc_limit", 800, int),
        idf_table=idf_table,
        knrm_cfg=KnrmConfig(),
        pacrr_cfg=pacrr_cfg,
        drmm_cfg=DrmmConfig(),
    )

    epochs = args.epochs if args.epochs is not None else _cfg(values, "epochs", 100, int)
    cutoff = _cfg(values, "rerank_cutoff", 150, int)
    train_cfg = TrainConfig(
        epochs=epochs,
        batches_per_epoch=_cfg(values, "batches_per_epoch", 32, int),
        pairs_per_batch=_cfg(values, "pairs_per_batch", 16, int),
        lr_head=_cfg(values, "lr_head", 1e-3, float),
        lr_encoder=_cfg(values, "lr_encoder", 2e-5, float),
        rerank_cutoff_train=cutoff,
        grad_accum_chunk=_cfg(values, "grad_accum_chunk", _cfg(values, "pairs_per_batch", 16, int), int),
        seed=seed,
        loss=values.get("loss", "hinge"),
    )

    valid_ids = _split_validation(sorted(qrels), values, seed)
    valid_set = set(valid_ids)
    data = TrainData(
        corpus=corpus,
        topics=topics,
        train_qrels={q: v for q, v in qrels.items() if q not in valid_set},
        train_candidates={q: v for q, v in candidates.items() if q not in valid_set},
        valid_qrels={q: v for q, v in qrels.items() if q in valid_set},
        valid_candidates={q: v for q, v in candidates.items() if q in valid_set},
    )
    metric = MetricSpec.parse(values.get("valid_metric", "P@20"))
    validator = make_validator(data, metric, RerankConfig(cutoff=cutoff))

    result = train(pipeline, data, train_cfg, validator, args.out)
    print(f"validation-queries\t{','.join(valid_ids)}")
    print(f"best-epoch\t{result.best_epoch}")
    print(f"best-{metric.label}\t{result.best_metric:.6f}")
    print(f"best-checkpoint\t{result.best_path}")
    return 0


def cmd_rerank(args) -> int:
    torch.set_num_threads(args.threads or 1)
    pipeline = ScoringPipeline.load(args.checkpoint)
    topics = load_topics(args.topics)
    candidates = load_run(args.candidates)
    corpus = load_corpus(args.corpus)
    run = rerank_run(
        pipeline, topics, candidates, corpus, RerankConfig(cutoff=args.cutoff), args.tag
    )
    write_run(run, args.out, args.tag)
    print(f"wrote\t{args.out}")
    return 0


def cmd_evaluate(args) -> int:
    run = load_run(args.run)
    qrels = load_qrels(args.qrels)
    specs = []
    for token in args.metrics.split(","):
        try:
            specs.append(MetricSpec.parse(token))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    compare = load_run(args.compare) if args.compare else None
    for spec in specs:
        values = per_query_metric(run, qrels, spec)
        for query_id in sorted(values):
            print(f"{spec.label}\t{query_id}\t{values[query_id]:.4f}")
        mean = sum(values.values()) / len(values) if values else 0.0
        print(f"{spec.label}\tall\t{mean:.4f}")
    if compare is not None:
        for spec in specs:
            a = per_query_metric(run, qrels, spec)
            b = per_query_metric(compare, qrels, spec)
            keys = sorted(a)
            try:
                p = paired_t_test([a[k] for k in keys], [b[k] for k in keys])
            except ValueError as exc:
                raise DataError(str(exc)) from None
            print(f"{spec.label}\tp-value\t{p:.6f}")
    return 0


def _benchmark_pipeline(args) -> ScoringPipeline:
    if args.checkpoint:
        return ScoringPipeline.load(args.checkpoint)
    vocab = Vocabulary([f"w{i:03d}" for i in range(200)])
    if args.ctx == "static":
        contextualizer = StaticContextualizer.from_random(vocab.tokens(), args.dim, args.seed)
    else:
        contextualizer = StubContextualizer(args.layers, args.active_layers or args.layers, args.dim)
    torch.manual_seed(args.seed)
    return build_pipeline(args.model, contextualizer, vocab)


def cmd_benchmark(args) -> int:
    torch.set_num_threads(args.threads or 1)
    if args.mode == "length":
        pipeline = _benchmark_pipeline(args)
        lengths = [int(x) for x in args.lengths.split(",")]
        rows = throughput_by_length(
            pipeline, lengths, args.docs_per_point, args.repetitions, seed=args.seed
        )
        header = ["length", "docs_per_second"]
    else:
        dataset = make_overlap_dataset(
            n_queries=args.queries, docs_per_query=args.docs_per_query, seed=args.seed,
            doc_length=args.doc_length,
        )
        all_queries = dataset.query_ids()
        data = split_train_valid(dataset, all_queries[: max(len(all_queries) // 4, 1)])
        vocab = Vocabulary.build([t.text for t in dataset.topics.values()] + [d.text for d in dataset.corpus.values()])
        layer_counts = [int(x) for x in args.layer_counts.split(",")]
        total = max(args.layers, max(layer_counts))

        def factory(active_layers: int) -> ScoringPipeline:
            torch.manual_seed(args.seed)
            return build_pipeline(
                args.model, StubContextualizer(total, active_layers, args.dim), vocab
            )

        bundle = LayerSweepBundle(
            data=data,
            train_cfg=TrainConfig(
                epochs=args.epochs, batches_per_epoch=8, pairs_per_batch=8,
                grad_accum_chunk=8, seed=args.seed,
            ),
            metric=MetricSpec.parse(args.metric),
            rerank_cutoff=args.docs_per_query,
            bench_doc_length=args.doc_length,
            docs_per_point=args.docs_per_point,
            repetitions=args.repetitions,
        )
        workdir = args.workdir or tempfile.mkdtemp(prefix="ctxrank-bench-")
        rows = quality_vs_layers(factory, layer_counts, bundle, workdir)
        header = ["layers", MetricSpec.parse(args.metric).label, "docs_per_second"]
    write_tsv(rows, header, args.out)
    if args.gnuplot:
        write_gnuplot(rows, header, args.gnuplot)
    print(f"wrote\t{args.out}")
    return 0


def cmd_export_simmat(args) -> int:
    torch.set_num_threads(args.threads or 1)
    corpus = load_corpus(args.corpus)
    topics = load_topics(args.topics)
    if args.query_id not in topics:
        raise DataError(f"query {args.query_id!r} not found in topics")
    if args.doc_id not in corpus:
        raise DataError(f"doc {args.doc_id!r} not found in corpus")
    if args.checkpoint:
        pipeline = ScoringPipeline.load(args.checkpoint)
    else:
        vocab = Vocabulary.build(
            [doc.text for doc in corpus.values()] + [t.text for t in topics.values()]
        )
        torch.manual_seed(args.seed)
        pipeline = build_pipeline(args.model, StubContextualizer(args.layers, dim=args.dim), vocab)
    tensor, query, doc = pipeline.pair_tensor(
        topics[args.query_id].text, corpus[args.doc_id].text
    )
    try:
        export_layer_csv(tensor, args.layer, args.out, query.tokens, doc.tokens)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(f"wrote\t{args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="ctxrank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[], description="Train a re-ranker from a config file.")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", default=None, help="override the config model name")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rerank", description="Re-rank candidates with a trained checkpoint.")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--cutoff", type=int, default=150)
    p.add_argument("--out", required=True)
    p.add_argument("--tag", default="ctxrank")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", description="Score a run against qrels.")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--metrics", default="P@20,nDCG@20,ERR@20")
    p.add_argument("--compare", default=None, help="second run; adds a paired t-test per metric")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", description="Throughput by length, or quality/speed by layer count.")
    p.add_argument("--mode", choices=("length", "layers"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gnuplot", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--model", default="knrm")
    p.add_argument("--ctx", choices=("stub", "static"), default="stub")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--active-layers", type=int, default=None, dest="active_layers")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--lengths", default="50,100,200,400,800")
    p.add_argument("--layer-counts", default="1,5,12", dest="layer_counts")
    p.add_argument("--docs-per-point", type=int, default=8, dest="docs_per_point")
    p.add_argument("--repetitions", type=int, default=3)
    p.add_argument("--queries", type=int, default=8)
    p.add_argument("--docs-per-query", type=int, default=20, dest="docs_per_query")
    p.add_argument("--doc-length", type=int, default=60, dest="doc_length")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--metric", default="nDCG@20")
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--workdir", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("export-simmat", description="Export one similarity-matrix layer as CSV.")
    p.add_argument("--corpus", required=True)
    p.add_argument("--topics", required=True)
    p.add_argument("--query-id", required=True, dest="query_id")
    p.add_argument("--doc-id", required=True, dest="doc_id")
    p.add_argument("--layer", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--model", default="knrm")
    p.add_argument("--layers", type=int, default=12)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_export_simmat)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    entry()
