"""Layered contextualized-similarity re-ranking toolkit."""

from .contextualizer import (
    AdapterContextualizer,
    ContextualizerSpec,
    LayeredEmbeddings,
    StaticContextualizer,
    StubContextualizer,
)
from .data_io import DocRecord, QrelRecord, RunEntry, Topic
from .evaluation import MetricSpec, RerankConfig
from .heads import DrmmConfig, KnrmConfig, PacrrConfig
from .pipeline import ScoringPipeline, build_pipeline, score_document
from .simtensor import SimilarityTensor, build_tensor, cosine
from .text_pipeline import SplitPlan, TokenizedText, Vocabulary, plan_splits, tokenize, truncate_doc
from .training import TrainConfig, TrainingPair, hinge_loss, sample_pairs, train

__version__ = "0.1.0"

__all__ = [
    "AdapterContextualizer",
    "ContextualizerSpec",
    "DocRecord",
    "DrmmConfig",
    "KnrmConfig",
    "LayeredEmbeddings",
    "MetricSpec",
    "PacrrConfig",
    "QrelRecord",
    "RerankConfig",
    "RunEntry",
    "ScoringPipeline",
    "SimilarityTensor",
    "SplitPlan",
    "StaticContextualizer",
    "StubContextualizer",
    "TokenizedText",
    "Topic",
    "TrainConfig",
    "TrainingPair",
    "Vocabulary",
    "build_pipeline",
    "build_tensor",
    "cosine",
    "hinge_loss",
    "plan_splits",
    "sample_pairs",
    "score_document",
    "tokenize",
    "train",
    "truncate_doc",
]
