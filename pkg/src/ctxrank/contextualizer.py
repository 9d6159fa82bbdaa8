"""Layered per-token representations for (query, document-segment) pairs.

Three implementations share one interface:

  static   -- a context-free word-vector table (single layer, no
              classification vector);
  stub     -- a deterministic multi-layer mixer that stands in for a
              pretrained encoder at desk scale: layer 1 is a hash-seeded
              unit vector per token id, each further layer averages a
              growing window of the layer below, and the classification
              vector carries a query/document token-overlap feature;
  adapter  -- a boundary wrapper bridging any external pretrained encoder
              (token ids in, layered float arrays plus cls out).

All kinds can emit only the first `active_layers` layers; for the stub
this is an exact prefix of the full computation, so truncating layers
never changes the layers that are kept.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BudgetExceededError
from .text_pipeline import SplitPlan, TokenizedText

DTYPE = torch.float64

# Extra classification dims carrying the stub's log-scaled overlap count.
STUB_OVERLAP_DIMS = 4

_OOV_VECTOR_SEED = 0x00F51DE


@dataclass(frozen=True)
class ContextualizerSpec:
    kind: str  # static | stub | pretrained-adapter
    total_layers: int
    active_layers: int
    dim: int
    model_limit: int = 512
    control_tokens: int = 3

    def __post_init__(self):
        if self.kind not in ("static", "stub", "pretrained-adapter"):
            raise ValueError(f"unknown contextualizer kind {self.kind!r}")
        if self.kind == "static" and self.total_layers != 1:
            raise ValueError("static embeddings have exactly one layer")
        if not (1 <= self.active_layers <= self.total_layers):
            raise ValueError(
                f"active_layers must be in [1, {self.total_layers}], got {self.active_layers}"
            )
        if self.dim < 1 or self.model_limit < 1:
            raise ValueError("dim and model_limit must be positive")


@dataclass
class LayeredEmbeddings:
    """Per-layer token vectors for a query and one document segment.

    Layer index runs 1..layers with deeper layers last. `cls_vec` is only
    present for kinds that summarize the pair (stub, adapter).
    """

    layers: int
    dim: int
    query_vecs: torch.Tensor  # (layers, |Q|, dim)
    doc_vecs: torch.Tensor  # (layers, |D_seg|, dim)
    cls_vec: torch.Tensor | None = None

    def __post_init__(self):
        expect_q = (self.layers, self.query_vecs.shape[1], self.dim)
        expect_d = (self.layers, self.doc_vecs.shape[1], self.dim)
        if tuple(self.query_vecs.shape) != expect_q or tuple(self.doc_vecs.shape) != expect_d:
            raise ValueError(
                f"embedding shapes {tuple(self.query_vecs.shape)}/{tuple(self.doc_vecs.shape)} "
                f"do not match layers={self.layers} dim={self.dim}"
            )
        for t in (self.query_vecs, self.doc_vecs, self.cls_vec):
            if t is not None and t.numel() and not bool(torch.isfinite(t).all()):
                raise ValueError("non-finite embedding values")


def _unit_rows(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=-1, keepdims=True)
    return mat / np.maximum(norms, 1e-12)


def _seeded_unit_vector(seed_words: list[int], dim: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed_words))
    vec = rng.standard_normal(dim)
    return vec / max(np.linalg.norm(vec), 1e-12)


class Contextualizer:
    """Common interface: encode one (query, document-segment) pair."""

    spec: ContextualizerSpec
    pair_encoding = True  # enforces the joint input budget
    trainable = False

    @property
    def cls_dim(self) -> int | None:
        """Width of the classification vector, or None if unsupported."""
        return None

    def encode(self, query: TokenizedText, doc_segment: TokenizedText) -> LayeredEmbeddings:
        raise NotImplementedError

    def parameters(self):
        """Trainable encoder parameters (empty for frozen kinds)."""
        return []

    def _check_budget(self, query: TokenizedText, doc_segment: TokenizedText) -> None:
        if not self.pair_encoding:
            return
        spec = self.spec
        used = len(query) + len(doc_segment) + spec.control_tokens
        if used > spec.model_limit:
            raise BudgetExceededError(
                f"query+segment+control = {used} tokens exceeds the "
                f"{spec.model_limit}-token model limit; split the document first"
            )


class StaticContextualizer(Contextualizer):
    """Context-free word vectors: one layer, identical vector per token.

    Unknown tokens share a single deterministic unit OOV vector, so two
    occurrences of the same unknown token still match each other exactly.
    """

    pair_encoding = False

    def __init__(self, table: dict[str, np.ndarray], dim: int, model_limit: int = 512):
        self.spec = ContextualizerSpec("static", 1, 1, dim, model_limit)
        self._table = {tok: np.asarray(vec, dtype=np.float64) for tok, vec in table.items()}
        for tok, vec in self._table.items():
            if vec.shape != (dim,):
                raise ValueError(f"vector for {tok!r} has shape {vec.shape}, expected ({dim},)")
        self._oov = _seeded_unit_vector([_OOV_VECTOR_SEED], dim)

    @classmethod
    def from_table_file(cls, path, model_limit: int = 512) -> "StaticContextualizer":
        """Load `token v1 v2 ... vd` lines (GloVe-style text format)."""
        table: dict[str, np.ndarray] = {}
        dim = None
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                parts = raw.split()
                if not parts:
                    continue
                token, values = parts[0], parts[1:]
                if dim is None:
                    dim = len(values)
                if len(values) != dim or dim == 0:
                    raise ValueError(f"{path}: line {lineno}: expected {dim} vector components")
                table[token] = np.array([float(v) for v in values], dtype=np.float64)
        if dim is None:
            raise ValueError(f"{path}: empty word-vector table")
        return cls(table, dim, model_limit)

    @classmethod
    def from_random(cls, tokens, dim: int, seed: int = 0, model_limit: int = 512) -> "StaticContextualizer":
        """Deterministic random unit table over the given tokens."""
        table = {
            tok: _seeded_unit_vector([seed, i], dim) for i, tok in enumerate(sorted(set(tokens)))
        }
        return cls(table, dim, model_limit)

    def lookup(self, token: str) -> np.ndarray:
        return self._table.get(token, self._oov)

    def _embed(self, text: TokenizedText) -> torch.Tensor:
        if len(text) == 0:
            return torch.zeros((1, 0, self.spec.dim), dtype=DTYPE)
        mat = np.stack([self.lookup(tok) for tok in text.tokens])
        return torch.from_numpy(mat).to(DTYPE).unsqueeze(0)

    def encode(self, query: TokenizedText, doc_segment: TokenizedText) -> LayeredEmbeddings:
        return LayeredEmbeddings(
            layers=1,
            dim=self.spec.dim,
            query_vecs=self._embed(query),
            doc_vecs=self._embed(doc_segment),
            cls_vec=None,
        )


class StubContextualizer(Contextualizer):
    """Deterministic multi-layer stand-in for a pretrained pair encoder.

    Layer 1 assigns each token a unit vector seeded by its vocabulary id;
    layer l+1 at position i is the unit-normalized mean of layer-l vectors
    over positions [i-l, i+l] clipped to the same segment, so deeper layers
    see wider context. The classification vector is the unit-normalized
    mean of top-layer vectors over query+segment, concatenated with a
    log-scaled count of document tokens that appear in the query (repeated
    over STUB_OVERLAP_DIMS dims) so pair-level relevance can flow through
    the classification path.

    `scramble_doc_tokens` draws document-side layer-1 vectors from a
    per-document seed space instead, which decouples token-match similarity
    from token identity while leaving the overlap feature intact
    (a diagnostic for how much signal travels through each path).
    """

    def __init__(
        self,
        total_layers: int = 12,
        active_layers: int | None = None,
        dim: int = 32,
        model_limit: int = 512,
        control_tokens: int = 3,
        scramble_doc_tokens: bool = False,
    ):
        self.spec = ContextualizerSpec(
            "stub",
            total_layers,
            total_layers if active_layers is None else active_layers,
            dim,
            model_limit,
            control_tokens,
        )
        self.scramble_doc_tokens = scramble_doc_tokens
        self._vector_cache: dict[tuple[int, int], np.ndarray] = {}

    @property
    def cls_dim(self) -> int:
        return self.spec.dim + STUB_OVERLAP_DIMS

    def with_active_layers(self, active_layers: int) -> "StubContextualizer":
        out = StubContextualizer(
            self.spec.total_layers,
            active_layers,
            self.spec.dim,
            self.spec.model_limit,
            self.spec.control_tokens,
            self.scramble_doc_tokens,
        )
        out._vector_cache = self._vector_cache
        return out

    def _token_vector(self, token_id: int, salt: int) -> np.ndarray:
        key = (salt, token_id)
        vec = self._vector_cache.get(key)
        if vec is None:
            vec = _seeded_unit_vector([salt, token_id], self.spec.dim)
            self._vector_cache[key] = vec
        return vec

    def _segment_layers(self, ids: tuple[int, ...], salt: int) -> np.ndarray:
        """(active_layers, n, dim) stack for one segment."""
        n, dim, active = len(ids), self.spec.dim, self.spec.active_layers
        layers = np.zeros((active, n, dim))
        if n == 0:
            return layers
        layers[0] = np.stack([self._token_vector(i, salt) for i in ids])
        for src in range(1, active):
            # building layer src+1 from layer src: window half-width = src
            padded = np.cumsum(layers[src - 1], axis=0)
            lo = np.maximum(np.arange(n) - src, 0)
            hi = np.minimum(np.arange(n) + src, n - 1)
            sums = padded[hi] - np.where(lo[:, None] > 0, padded[lo - 1], 0.0)
            layers[src] = _unit_rows(sums / (hi - lo + 1)[:, None])
        return layers

    def encode(self, query: TokenizedText, doc_segment: TokenizedText) -> LayeredEmbeddings:
        self._check_budget(query, doc_segment)
        doc_salt = 0
        if self.scramble_doc_tokens:
            doc_salt = 1 + zlib.crc32(np.asarray(doc_segment.ids, dtype=np.int64).tobytes())
        q_layers = self._segment_layers(query.ids, 0)
        d_layers = self._segment_layers(doc_segment.ids, doc_salt)

        top = np.concatenate([q_layers[-1], d_layers[-1]], axis=0)
        summary = np.zeros(self.spec.dim) if top.shape[0] == 0 else _unit_rows(top.mean(axis=0))
        query_ids = set(query.ids)
        overlap = sum(1 for i in doc_segment.ids if i in query_ids)
        cls = np.concatenate([summary.reshape(-1), np.full(STUB_OVERLAP_DIMS, np.log1p(overlap))])

        return LayeredEmbeddings(
            layers=self.spec.active_layers,
            dim=self.spec.dim,
            query_vecs=torch.from_numpy(q_layers).to(DTYPE),
            doc_vecs=torch.from_numpy(d_layers).to(DTYPE),
            cls_vec=torch.from_numpy(cls).to(DTYPE),
        )


class AdapterContextualizer(Contextualizer):
    """Bridge to an external pretrained pair encoder.

    The bridged object must provide `total_layers`, `dim`, `cls_dim`, and

        encode_pair(query_ids, doc_ids, active_layers)
            -> (query_layers, doc_layers, cls)

    returning exactly `active_layers` layers as float arrays of shape
    (active_layers, n_tokens, dim) plus a (cls_dim,) classification vector.
    Implementations should stop processing at `active_layers` to realize
    the layer-truncation speedup. With `fine_tune=True` the encoder's
    parameters (when it is a torch module) join the training optimizer.
    """

    def __init__(
        self,
        encoder,
        active_layers: int | None = None,
        model_limit: int = 512,
        control_tokens: int = 3,
        fine_tune: bool = False,
    ):
        total = int(encoder.total_layers)
        self.spec = ContextualizerSpec(
            "pretrained-adapter",
            total,
            total if active_layers is None else active_layers,
            int(encoder.dim),
            model_limit,
            control_tokens,
        )
        self.encoder = encoder
        self.fine_tune = fine_tune

    @property
    def trainable(self) -> bool:  # type: ignore[override]
        return self.fine_tune

    @property
    def cls_dim(self) -> int:
        return int(self.encoder.cls_dim)

    def parameters(self):
        if self.fine_tune and hasattr(self.encoder, "parameters"):
            return list(self.encoder.parameters())
        return []

    def encode(self, query: TokenizedText, doc_segment: TokenizedText) -> LayeredEmbeddings:
        self._check_budget(query, doc_segment)
        active = self.spec.active_layers
        q_layers, d_layers, cls = self.encoder.encode_pair(query.ids, doc_segment.ids, active)
        q_layers = torch.as_tensor(q_layers, dtype=DTYPE) if not torch.is_tensor(q_layers) else q_layers
        d_layers = torch.as_tensor(d_layers, dtype=DTYPE) if not torch.is_tensor(d_layers) else d_layers
        cls = torch.as_tensor(cls, dtype=DTYPE) if not torch.is_tensor(cls) else cls
        if q_layers.shape[0] != active or d_layers.shape[0] != active:
            raise ValueError(
                f"bridged encoder returned {q_layers.shape[0]}/{d_layers.shape[0]} layers, "
                f"expected {active}"
            )
        if cls.shape != (self.cls_dim,):
            raise ValueError(f"bridged cls has shape {tuple(cls.shape)}, expected ({self.cls_dim},)")
        return LayeredEmbeddings(
            layers=active,
            dim=self.spec.dim,
            query_vecs=q_layers,
            doc_vecs=d_layers,
            cls_vec=cls,
        )


def aggregate_cls(per_segment: list[torch.Tensor]) -> torch.Tensor:
    """Component-wise mean of per-segment classification vectors."""
    if not per_segment:
        raise ValueError("no classification vectors to aggregate")
    dims = {tuple(v.shape) for v in per_segment}
    if len(dims) != 1:
        raise ValueError(f"classification vectors disagree on shape: {sorted(dims)}")
    return torch.stack(per_segment).mean(dim=0)


def stitch_segments(per_segment: list[LayeredEmbeddings], plan: SplitPlan) -> LayeredEmbeddings:
    """Reassemble full-document embeddings from per-segment encodings.

    Document vectors are concatenated in plan order; the query is identical
    in every segment by construction, so its vectors come from the first
    segment. The classification vector is the mean over segments.
    """
    if len(per_segment) != len(plan):
        raise ValueError(f"{len(per_segment)} segment encodings for {len(plan)} planned spans")
    first = per_segment[0]
    for emb, (start, end) in zip(per_segment, plan.segments):
        if emb.layers != first.layers or emb.dim != first.dim:
            raise ValueError("segments disagree on layer count or dimension")
        if emb.doc_vecs.shape[1] != end - start:
            raise ValueError(
                f"segment of {emb.doc_vecs.shape[1]} tokens does not match span ({start},{end})"
            )
    doc_vecs = torch.cat([emb.doc_vecs for emb in per_segment], dim=1)
    cls = None
    if first.cls_vec is not None:
        cls = aggregate_cls([emb.cls_vec for emb in per_segment])
    return LayeredEmbeddings(
        layers=first.layers,
        dim=first.dim,
        query_vecs=first.query_vecs,
        doc_vecs=doc_vecs,
        cls_vec=cls,
    )
