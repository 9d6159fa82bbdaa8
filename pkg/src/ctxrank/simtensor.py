"""Layered query-by-document cosine similarity tensors.

One (layers, |Q|, |D|) tensor per pair: cell [l, i, j] is the cosine
between the layer-l vectors of query token i and document token j. The
layer axis acts like an image channel, so every head consumes L = 1
(static vectors) and L > 1 (contextualized) through the same code path.

A zero vector (padding, empty segment) gets similarity 0 against
everything; padding cells appended for batching are set to -1, the
no-match end of every head's value range.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import torch

from .contextualizer import LayeredEmbeddings

ZERO_NORM_EPS = 1e-12
PAD_VALUE = -1.0


@dataclass
class SimilarityTensor:
    values: torch.Tensor  # (layers, query_len, doc_len)
    layers: int
    query_len: int
    doc_len: int

    def __post_init__(self):
        if tuple(self.values.shape) != (self.layers, self.query_len, self.doc_len):
            raise ValueError(
                f"tensor shape {tuple(self.values.shape)} does not match "
                f"({self.layers}, {self.query_len}, {self.doc_len})"
            )
        if self.values.numel() and not bool(torch.isfinite(self.values).all()):
            raise ValueError("non-finite similarity values")


def cosine(u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """dot(u,v) / (|u||v|); 0 when either vector is (numerically) zero."""
    u = torch.as_tensor(u)
    v = torch.as_tensor(v)
    if u.shape != v.shape or u.dim() != 1:
        raise ValueError(f"expected equal-length vectors, got {tuple(u.shape)} and {tuple(v.shape)}")
    nu = torch.linalg.vector_norm(u)
    nv = torch.linalg.vector_norm(v)
    if float(nu) < ZERO_NORM_EPS or float(nv) < ZERO_NORM_EPS:
        return torch.zeros((), dtype=u.dtype)
    return (u * v).sum() / (nu * nv)


def _unit(vecs: torch.Tensor) -> torch.Tensor:
    """Row-normalize (layers, n, dim); zero rows stay zero."""
    norms = torch.linalg.vector_norm(vecs, dim=-1, keepdim=True)
    return vecs / torch.clamp(norms, min=ZERO_NORM_EPS)


def build_tensor(emb: LayeredEmbeddings) -> SimilarityTensor:
    """Cosine similarities for all (layer, query token, document token) cells.

    Differentiable with respect to the embeddings, so gradients reach a
    fine-tunable encoder through the tensor.
    """
    q = _unit(emb.query_vecs)
    d = _unit(emb.doc_vecs)
    values = torch.bmm(q, d.transpose(1, 2))
    return SimilarityTensor(
        values=values,
        layers=emb.layers,
        query_len=emb.query_vecs.shape[1],
        doc_len=emb.doc_vecs.shape[1],
    )


def pad_doc_axis(tensor: SimilarityTensor, target_doc_len: int) -> SimilarityTensor:
    """Right-pad the document axis with the -1 sentinel (for batching)."""
    if target_doc_len < tensor.doc_len:
        raise ValueError(f"cannot shrink doc axis {tensor.doc_len} -> {target_doc_len}")
    if target_doc_len == tensor.doc_len:
        return tensor
    pad = torch.full(
        (tensor.layers, tensor.query_len, target_doc_len - tensor.doc_len),
        PAD_VALUE,
        dtype=tensor.values.dtype,
    )
    return SimilarityTensor(
        values=torch.cat([tensor.values, pad], dim=2),
        layers=tensor.layers,
        query_len=tensor.query_len,
        doc_len=target_doc_len,
    )


def export_layer_csv(
    tensor: SimilarityTensor,
    layer: int,
    path,
    query_tokens=None,
    doc_tokens=None,
) -> None:
    """Write one layer as a CSV grid (query tokens as rows, doc tokens as columns).

    `layer` is 1-based, matching the layer indexing everywhere else.
    """
    if not (1 <= layer <= tensor.layers):
        raise ValueError(f"layer must be in [1, {tensor.layers}], got {layer}")
    grid = tensor.values[layer - 1].detach().cpu().numpy()
    q_labels = list(query_tokens) if query_tokens is not None else [
        f"q{i}" for i in range(tensor.query_len)
    ]
    d_labels = list(doc_tokens) if doc_tokens is not None else [
        f"d{j}" for j in range(tensor.doc_len)
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + d_labels)
        for label, row in zip(q_labels, grid):
            writer.writerow([label] + [f"{v:.6f}" for v in row])
