"""End-to-end scoring: split, encode, stitch, build tensor, apply head.

ScoringPipeline bundles a head with its contextualizer, vocabulary, and
document budget so one object can score raw text, be trained, and be
serialized. Checkpoints are single .npz files holding a JSON config echo
(including the vocabulary) plus named float64 parameter arrays; saving
and loading round-trips every parameter bit-exactly.
"""

from __future__ import annotations

import io
import json
import os

import numpy as np
import torch

from .contextualizer import (
    AdapterContextualizer,
    Contextualizer,
    LayeredEmbeddings,
    StaticContextualizer,
    StubContextualizer,
    stitch_segments,
)
from .errors import CheckpointError
from .heads import (
    DrmmConfig,
    HeadOutput,
    KnrmConfig,
    PacrrConfig,
    ScoringHead,
    build_head,
)
from .simtensor import SimilarityTensor, build_tensor
from .text_pipeline import TokenizedText, Vocabulary, plan_splits, tokenize, truncate_doc

CHECKPOINT_FORMAT = "ctxrank-checkpoint-v1"
DEFAULT_DOC_TOKEN_LIMIT = 800


def encode_document(
    contextualizer: Contextualizer, query: TokenizedText, doc: TokenizedText
) -> LayeredEmbeddings:
    """Encode a whole (pre-truncated) document: plan splits, encode each
    segment with the full query, and stitch the segments back together."""
    spec = contextualizer.spec
    plan = plan_splits(len(doc), len(query), spec.model_limit, spec.control_tokens)
    segments = [contextualizer.encode(query, doc.slice(s, e)) for s, e in plan.segments]
    return stitch_segments(segments, plan)


def score_document(
    head: ScoringHead,
    query: TokenizedText,
    doc: TokenizedText,
    contextualizer: Contextualizer,
    query_idf: torch.Tensor | None = None,
) -> HeadOutput:
    """Relevance estimate for one (query, document) pair.

    The document must already be truncated to the scoring budget.
    Deterministic given fixed parameters.
    """
    emb = encode_document(contextualizer, query, doc)
    tensor = build_tensor(emb)
    return head(
        tensor, cls=emb.cls_vec, query_vecs=emb.query_vecs.mean(dim=0), query_idf=query_idf
    )


class ScoringPipeline:
    """A trained (or trainable) ranker over raw query/document text.

    When the contextualizer is frozen, similarity tensors are cached per
    (query, document) token-id pair, which makes repeated scoring during
    training epochs and validation re-ranking cheap.
    """

    def __init__(
        self,
        model_name: str,
        head: ScoringHead,
        contextualizer: Contextualizer,
        vocab: Vocabulary,
        doc_token_limit: int = DEFAULT_DOC_TOKEN_LIMIT,
        idf_table: dict[str, float] | None = None,
        max_cache_entries: int = 200_000,
    ):
        self.model_name = model_name
        self.head = head
        self.contextualizer = contextualizer
        self.vocab = vocab
        self.doc_token_limit = doc_token_limit
        self.idf_table = idf_table
        self.max_cache_entries = max_cache_entries
        self._cache: dict[tuple, tuple] = {}

    # -- text preparation ------------------------------------------------

    def prepare_query(self, text: str) -> TokenizedText:
        return tokenize(text, self.vocab)

    def prepare_doc(self, text: str) -> TokenizedText:
        return truncate_doc(tokenize(text, self.vocab), self.doc_token_limit)

    def query_idf_vector(self, query: TokenizedText) -> torch.Tensor | None:
        if self.idf_table is None:
            return None
        values = [self.idf_table.get(tok, 0.0) for tok in query.tokens]
        return torch.tensor(values, dtype=torch.float64)

    # -- scoring ----------------------------------------------------------

    def _pair_inputs(self, query: TokenizedText, doc: TokenizedText):
        key = (query.ids, doc.ids)
        cached = None if self.contextualizer.trainable else self._cache.get(key)
        if cached is None:
            emb = encode_document(self.contextualizer, query, doc)
            tensor = build_tensor(emb)
            cached = (tensor, emb.cls_vec, emb.query_vecs.mean(dim=0))
            if not self.contextualizer.trainable and len(self._cache) < self.max_cache_entries:
                self._cache[key] = cached
        return cached

    def score_tokenized(self, query: TokenizedText, doc: TokenizedText) -> HeadOutput:
        """Differentiable score for a pre-tokenized, pre-truncated document."""
        tensor, cls, query_vecs = self._pair_inputs(query, doc)
        return self.head(tensor, cls=cls, query_vecs=query_vecs, query_idf=self.query_idf_vector(query))

    def score_text(self, query_text: str, doc_text: str) -> float:
        with torch.no_grad():
            out = self.score_tokenized(self.prepare_query(query_text), self.prepare_doc(doc_text))
        return float(out.score)

    def pair_tensor(self, query_text: str, doc_text: str) -> tuple[SimilarityTensor, TokenizedText, TokenizedText]:
        """Similarity tensor plus the tokenized pair (for inspection/export)."""
        query = self.prepare_query(query_text)
        doc = self.prepare_doc(doc_text)
        with torch.no_grad():
            emb = encode_document(self.contextualizer, query, doc)
            tensor = build_tensor(emb)
        return tensor, query, doc

    # -- training plumbing -------------------------------------------------

    def head_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.head.parameters())

    def encoder_parameters(self) -> list[torch.nn.Parameter]:
        return list(self.contextualizer.parameters())

    def clear_cache(self) -> None:
        self._cache.clear()

    # -- serialization ------------------------------------------------------

    def config_echo(self) -> dict:
        ctx = self.contextualizer
        spec = ctx.spec
        cfg = {
            "format": CHECKPOINT_FORMAT,
            "model": self.model_name,
            "doc_token_limit": self.doc_token_limit,
            "vocab": self.vocab.tokens(),
            "idf_table": self.idf_table,
            "contextualizer": {
                "kind": spec.kind,
                "total_layers": spec.total_layers,
                "active_layers": spec.active_layers,
                "dim": spec.dim,
                "model_limit": spec.model_limit,
                "control_tokens": spec.control_tokens,
                "scramble_doc_tokens": bool(getattr(ctx, "scramble_doc_tokens", False)),
            },
            "head": _head_config_echo(self.head),
        }
        return cfg

    def save(self, path: str | os.PathLike) -> None:
        arrays: dict[str, np.ndarray] = {}
        for name, param in self.head.state_dict().items():
            arrays[f"param::{name}"] = param.detach().cpu().numpy()
        ctx = self.contextualizer
        if isinstance(ctx, StaticContextualizer):
            tokens = sorted(ctx._table)
            arrays["static::vectors"] = np.stack([ctx._table[t] for t in tokens]) if tokens else np.zeros((0, ctx.spec.dim))
            config = self.config_echo()
            config["static_tokens"] = tokens
        else:
            config = self.config_echo()
        if isinstance(ctx, AdapterContextualizer) and hasattr(ctx.encoder, "state_dict"):
            for name, param in ctx.encoder.state_dict().items():
                arrays[f"encoder_param::{name}"] = param.detach().cpu().numpy()
        payload = json.dumps(config, sort_keys=True).encode("utf-8")
        arrays["config_json"] = np.frombuffer(payload, dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **{k: arrays[k] for k in sorted(arrays)})
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    @classmethod
    def load(cls, path: str | os.PathLike, encoder=None) -> "ScoringPipeline":
        try:
            with np.load(path) as npz:
                data = {k: npz[k] for k in npz.files}
        except (OSError, ValueError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
        if "config_json" not in data:
            raise CheckpointError(f"{path}: missing config echo")
        config = json.loads(bytes(data["config_json"].tobytes()).decode("utf-8"))
        if config.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path}: unknown checkpoint format {config.get('format')!r}")

        ctx_cfg = config["contextualizer"]
        kind = ctx_cfg["kind"]
        if kind == "stub":
            contextualizer: Contextualizer = StubContextualizer(
                total_layers=ctx_cfg["total_layers"],
                active_layers=ctx_cfg["active_layers"],
                dim=ctx_cfg["dim"],
                model_limit=ctx_cfg["model_limit"],
                control_tokens=ctx_cfg["control_tokens"],
                scramble_doc_tokens=ctx_cfg.get("scramble_doc_tokens", False),
            )
        elif kind == "static":
            tokens = config.get("static_tokens", [])
            vectors = data.get("static::vectors", np.zeros((0, ctx_cfg["dim"])))
            table = {tok: vectors[i] for i, tok in enumerate(tokens)}
            contextualizer = StaticContextualizer(table, ctx_cfg["dim"], ctx_cfg["model_limit"])
        elif kind == "pretrained-adapter":
            if encoder is None:
                raise CheckpointError(
                    f"{path}: adapter checkpoints need the bridged encoder passed to load()"
                )
            contextualizer = AdapterContextualizer(
                encoder,
                active_layers=ctx_cfg["active_layers"],
                model_limit=ctx_cfg["model_limit"],
                control_tokens=ctx_cfg["control_tokens"],
            )
            encoder_state = {
                name.removeprefix("encoder_param::"): torch.from_numpy(arr)
                for name, arr in data.items()
                if name.startswith("encoder_param::")
            }
            if encoder_state and hasattr(encoder, "load_state_dict"):
                encoder.load_state_dict(encoder_state)
        else:
            raise CheckpointError(f"{path}: unknown contextualizer kind {kind!r}")

        head = _head_from_config_echo(config["head"])
        state = {
            name.removeprefix("param::"): torch.from_numpy(arr)
            for name, arr in data.items()
            if name.startswith("param::")
        }
        try:
            head.load_state_dict(state)
        except RuntimeError as exc:
            raise CheckpointError(f"{path}: parameter arrays do not match config echo: {exc}") from None

        return cls(
            model_name=config["model"],
            head=head,
            contextualizer=contextualizer,
            vocab=Vocabulary(config["vocab"]),
            doc_token_limit=config["doc_token_limit"],
            idf_table=config.get("idf_table"),
        )


def _head_config_echo(head: ScoringHead) -> dict:
    echo: dict = {"cls_dim": head.cls_dim}
    cfg = getattr(head, "cfg", None)
    if cfg is not None:
        echo["type"] = type(cfg).__name__
        echo.update(
            {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}
        )
    echo["n_channels"] = getattr(head, "n_channels", None)
    echo["query_dim"] = getattr(head, "query_dim", None)
    return echo


def _head_from_config_echo(echo: dict) -> ScoringHead:
    cls_dim = echo["cls_dim"]
    kind = echo.get("type")
    if kind == "KnrmConfig":
        cfg = KnrmConfig(
            kernel_mus=tuple(echo["kernel_mus"]),
            kernel_sigmas=tuple(echo["kernel_sigmas"]),
            epsilon=echo["epsilon"],
        )
        from .heads import KnrmHead

        return KnrmHead(echo["n_channels"], cfg, cls_dim=cls_dim)
    if kind == "PacrrConfig":
        cfg = PacrrConfig(
            ngram_sizes=tuple(echo["ngram_sizes"]),
            filters_per_size=echo["filters_per_size"],
            k_max=echo["k_max"],
            max_query_len=echo["max_query_len"],
            use_idf=echo["use_idf"],
        )
        from .heads import PacrrHead

        return PacrrHead(echo["n_channels"], cfg, cls_dim=cls_dim)
    if kind == "DrmmConfig":
        cfg = DrmmConfig(
            bin_edges=tuple(echo["bin_edges"]),
            hidden_sizes=tuple(echo["hidden_sizes"]),
        )
        from .heads import DrmmHead

        return DrmmHead(echo["n_channels"], cfg, cls_dim=cls_dim, query_dim=echo["query_dim"])
    from .heads import VanillaClsHead

    return VanillaClsHead(cls_dim)


def compute_idf_table(corpus_texts) -> dict[str, float]:
    """Smoothed inverse document frequency over tokenized corpus texts:
    idf(t) = log((N + 1) / (df(t) + 1))."""
    import math

    from .text_pipeline import split_words

    df: dict[str, int] = {}
    n_docs = 0
    for text in corpus_texts:
        n_docs += 1
        for token in set(split_words(text)):
            df[token] = df.get(token, 0) + 1
    return {tok: math.log((n_docs + 1) / (count + 1)) for tok, count in df.items()}


def build_pipeline(
    model_name: str,
    contextualizer: Contextualizer,
    vocab: Vocabulary,
    doc_token_limit: int = DEFAULT_DOC_TOKEN_LIMIT,
    idf_table: dict[str, float] | None = None,
    knrm_cfg: KnrmConfig | None = None,
    pacrr_cfg: PacrrConfig | None = None,
    drmm_cfg: DrmmConfig | None = None,
) -> ScoringPipeline:
    """Wire a head to a contextualizer with consistent channel/cls dims."""
    head = build_head(
        model_name,
        n_channels=contextualizer.spec.active_layers,
        cls_dim=contextualizer.cls_dim or 0,
        query_dim=contextualizer.spec.dim,
        knrm_cfg=knrm_cfg,
        pacrr_cfg=pacrr_cfg,
        drmm_cfg=drmm_cfg,
    )
    return ScoringPipeline(
        model_name=model_name,
        head=head,
        contextualizer=contextualizer,
        vocab=vocab,
        doc_token_limit=doc_token_limit,
        idf_table=idf_table,
    )
