import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from ctxrank.contextualizer import StubContextualizer
from ctxrank.pipeline import build_pipeline
from ctxrank.text_pipeline import Vocabulary

torch.set_num_threads(1)


@pytest.fixture
def small_vocab() -> Vocabulary:
    return Vocabulary.build(
        [
            "river bank deposit money cash flow",
            "the quick brown fox jumps over the lazy dog",
            "rain snow sun cloud wind storm",
        ]
    )


@pytest.fixture
def stub_pipeline_factory(small_vocab):
    """Fresh deterministic pipeline per (model, layers, dim)."""

    def factory(model_name="knrm", total_layers=3, dim=16, seed=0, **kwargs):
        torch.manual_seed(seed)
        ctx = StubContextualizer(total_layers=total_layers, dim=dim)
        return build_pipeline(model_name, ctx, small_vocab, **kwargs)

    return factory


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


@pytest.fixture
def toy_files(tmp_path):
    """Small consistent corpus/topics/qrels/candidates on disk."""
    corpus = tmp_path / "corpus.tsv"
    topics = tmp_path / "topics.tsv"
    qrels = tmp_path / "qrels.txt"
    run = tmp_path / "candidates.run"
    write_lines(
        corpus,
        [
            "d1\triver bank water flow",
            "d2\tmoney bank deposit cash",
            "d3\tthe quick brown fox",
            "d4\train snow sun cloud",
        ],
    )
    write_lines(topics, ["q1\triver bank", "q2\tmoney deposit"])
    write_lines(
        qrels,
        ["q1 0 d1 2", "q1 0 d2 0", "q1 0 d3 0", "q2 0 d2 1", "q2 0 d1 0", "q2 0 d4 0"],
    )
    write_lines(
        run,
        [
            "q1 Q0 d1 1 3.500000 bm25",
            "q1 Q0 d2 2 2.000000 bm25",
            "q1 Q0 d3 3 1.000000 bm25",
            "q2 Q0 d2 1 4.000000 bm25",
            "q2 Q0 d1 2 2.500000 bm25",
            "q2 Q0 d4 3 0.500000 bm25",
        ],
    )
    return {"corpus": corpus, "topics": topics, "qrels": qrels, "candidates": run}
