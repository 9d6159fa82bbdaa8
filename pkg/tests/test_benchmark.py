import time

import pytest
import torch

from ctxrank.benchmark import (
    LayerSweepBundle,
    quality_vs_layers,
    synthetic_docs,
    throughput_by_length,
    time_batch,
    write_gnuplot,
    write_tsv,
)
from ctxrank.contextualizer import StaticContextualizer, StubContextualizer
from ctxrank.evaluation import MetricSpec
from ctxrank.pipeline import build_pipeline
from ctxrank.synthetic import make_overlap_dataset, split_train_valid
from ctxrank.text_pipeline import Vocabulary
from ctxrank.training import TrainConfig


@pytest.fixture
def bench_vocab():
    return Vocabulary([f"w{i:03d}" for i in range(80)])


def _stub_pipeline(vocab, layers=12, dim=16, model="knrm", seed=0):
    torch.manual_seed(seed)
    return build_pipeline(model, StubContextualizer(total_layers=layers, dim=dim), vocab)


class TestTimingHarness:
    def test_overhead_below_five_percent(self):
        def busy(_):
            start = time.perf_counter()
            while time.perf_counter() - start < 0.002:
                pass

        items = list(range(20))
        measured = time_batch(busy, items, repetitions=3)
        assert measured == pytest.approx(20 * 0.002, rel=0.05)

    def test_warm_up_excluded(self):
        calls = []

        def fn(i):
            calls.append(i)

        time_batch(fn, [1, 2], repetitions=2)
        assert len(calls) == 6  # 1 warm-up + 2 timed passes


class TestThroughputByLength:
    def test_row_shape(self, bench_vocab):
        pipeline = _stub_pipeline(bench_vocab, layers=2)
        rows = throughput_by_length(pipeline, [10, 20, 30], docs_per_point=2, repetitions=3)
        assert [r.length for r in rows] == [10, 20, 30]
        assert all(r.docs_per_second > 0 for r in rows)

    def test_rate_does_not_increase_with_length(self, bench_vocab):
        pipeline = _stub_pipeline(bench_vocab, layers=4)
        rows = throughput_by_length(pipeline, [20, 320], docs_per_point=4, repetitions=3)
        assert rows[1].docs_per_second <= rows[0].docs_per_second

    def test_static_faster_than_deep_stub_at_800(self, bench_vocab):
        static = build_pipeline(
            "knrm",
            StaticContextualizer.from_random(bench_vocab.tokens(), 16),
            bench_vocab,
        )
        stub = _stub_pipeline(bench_vocab, layers=12)
        static_rate = throughput_by_length(static, [800], docs_per_point=3, repetitions=3)[0]
        stub_rate = throughput_by_length(stub, [800], docs_per_point=3, repetitions=3)[0]
        assert static_rate.docs_per_second > stub_rate.docs_per_second

    def test_parameters_untouched(self, bench_vocab):
        pipeline = _stub_pipeline(bench_vocab, layers=2)
        before = {k: v.clone() for k, v in pipeline.head.state_dict().items()}
        throughput_by_length(pipeline, [20], docs_per_point=2, repetitions=2)
        for key, value in pipeline.head.state_dict().items():
            assert torch.equal(before[key], value)

    def test_synthetic_docs_deterministic(self, bench_vocab):
        pipeline = _stub_pipeline(bench_vocab, layers=2)
        a = synthetic_docs(pipeline, 15, 3, seed=4)
        b = synthetic_docs(pipeline, 15, 3, seed=4)
        assert a == b


class TestLayerThroughputDirection:
    def test_rate_decreases_with_layer_count(self, bench_vocab):
        rates = []
        for layers in (2, 6, 12):
            pipeline = _stub_pipeline(bench_vocab, layers=layers)
            rows = throughput_by_length(pipeline, [400], docs_per_point=4, repetitions=3)
            rates.append(rows[0].docs_per_second)
        assert rates[0] > rates[1] > rates[2]


class TestQualityVsLayers:
    def test_sweep_produces_rows(self, tmp_path):
        dataset = make_overlap_dataset(n_queries=5, docs_per_query=8, seed=2, doc_length=16)
        data = split_train_valid(dataset, dataset.query_ids()[:1])
        vocab = Vocabulary.build(
            [t.text for t in dataset.topics.values()]
            + [d.text for d in dataset.corpus.values()]
        )

        def factory(active_layers):
            torch.manual_seed(0)
            return build_pipeline(
                "knrm", StubContextualizer(4, active_layers, 8), vocab
            )

        bundle = LayerSweepBundle(
            data=data,
            train_cfg=TrainConfig(
                epochs=1, batches_per_epoch=2, pairs_per_batch=4,
                grad_accum_chunk=4, seed=0, rerank_cutoff_train=8,
            ),
            metric=MetricSpec.parse("nDCG@20"),
            rerank_cutoff=8,
            bench_doc_length=24,
            docs_per_point=2,
            repetitions=2,
        )
        rows = quality_vs_layers(factory, [2, 4], bundle, tmp_path)
        assert [r.layers for r in rows] == [2, 4]
        assert all(0.0 <= r.metric <= 1.0 for r in rows)
        assert all(r.docs_per_second > 0 for r in rows)

    def test_full_depth_equals_unrestricted(self, bench_vocab):
        full = _stub_pipeline(bench_vocab, layers=6, seed=1)
        torch.manual_seed(1)
        restricted = build_pipeline(
            "knrm",
            StubContextualizer(total_layers=6, active_layers=6, dim=16),
            bench_vocab,
        )
        q, d = "w001 w002", "w003 w001 w004 w002 w005"
        assert full.score_text(q, d) == restricted.score_text(q, d)


class TestWriters:
    def test_tsv_and_gnuplot(self, tmp_path):
        from ctxrank.benchmark import ThroughputRow

        rows = [ThroughputRow(10, 123.456789), ThroughputRow(20, 60.0)]
        tsv = tmp_path / "out.tsv"
        gp = tmp_path / "out.dat"
        write_tsv(rows, ["length", "docs_per_second"], tsv)
        write_gnuplot(rows, ["length", "docs_per_second"], gp)
        tsv_lines = tsv.read_text().splitlines()
        assert tsv_lines[0] == "length\tdocs_per_second"
        assert tsv_lines[1] == "10\t123.456789"
        gp_lines = gp.read_text().splitlines()
        assert gp_lines[0] == "# length docs_per_second"
        assert gp_lines[2] == "20 60.000000"
