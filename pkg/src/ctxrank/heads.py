"""Trainable scoring heads over layered similarity tensors.

Each head maps a (layers, |Q|, |D|) similarity tensor -- plus, in the
joint ("cedr_*") variants, the encoder's classification vector -- to an
unbounded real relevance estimate (pairwise losses are shift-invariant,
so no squashing):

  KnrmHead   soft-counts similarities with Gaussian kernels per channel;
  PacrrHead  n-gram convolutions over the channel stack, max over
             filters, k-max pooling per query term;
  DrmmHead   fixed-bucket matching histograms per channel with a
             per-term feed-forward net and softmax term gating;
  VanillaClsHead  affine map on the classification vector alone.

Joint wiring: dense-combination heads (KNRM, PACRR) concatenate the
classification vector once at the final combination; DRMM concatenates
it into every per-term feature. The layer axis is an ordinary channel,
so L = 1 and L > 1 run the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .simtensor import PAD_VALUE, SimilarityTensor

DTYPE = torch.float64

# Cells at least this close to 1.0 count as exact matches: float cosines of
# identical vectors can land at 1 - 1e-16.
EXACT_MATCH_EPS = 1e-9

DEFAULT_KERNEL_MUS = (1.0, 0.9, 0.7, 0.5, 0.3, 0.1, -0.1, -0.3, -0.5, -0.7, -0.9)
DEFAULT_KERNEL_SIGMAS = (0.001,) + (0.1,) * 10


@dataclass(frozen=True)
class KnrmConfig:
    kernel_mus: tuple[float, ...] = DEFAULT_KERNEL_MUS
    kernel_sigmas: tuple[float, ...] = DEFAULT_KERNEL_SIGMAS
    epsilon: float = 1e-10

    def __post_init__(self):
        if len(self.kernel_mus) != len(self.kernel_sigmas) or not self.kernel_mus:
            raise ValueError("kernel_mus and kernel_sigmas must be parallel, non-empty")
        if any(s <= 0 for s in self.kernel_sigmas):
            raise ValueError("kernel sigmas must be positive")


@dataclass(frozen=True)
class PacrrConfig:
    ngram_sizes: tuple[int, ...] = (1, 2, 3)
    filters_per_size: int = 32
    k_max: int = 30
    max_query_len: int = 16
    use_idf: bool = False

    def __post_init__(self):
        if not self.ngram_sizes or any(n < 1 for n in self.ngram_sizes):
            raise ValueError("ngram sizes must be positive")
        if self.k_max < 1 or self.max_query_len < 1 or self.filters_per_size < 1:
            raise ValueError("k_max, max_query_len, filters_per_size must be positive")


@dataclass(frozen=True)
class DrmmConfig:
    # 10 even bins over [-1, 1) plus a dedicated exact-match bin for 1.0.
    bin_edges: tuple[float, ...] = (
        -1.0, -0.8, -0.6, -0.4, -0.2, 0.0, 0.2, 0.4, 0.6, 0.8, 1.0,
    )
    hidden_sizes: tuple[int, ...] = (5, 1)

    def __post_init__(self):
        edges = self.bin_edges
        if len(edges) < 2 or edges[0] != -1.0 or edges[-1] != 1.0:
            raise ValueError("bin edges must run from -1.0 to 1.0")
        if any(a >= b for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be strictly increasing")
        if not self.hidden_sizes or self.hidden_sizes[-1] != 1:
            raise ValueError("hidden_sizes must end with a width-1 term-score layer")

    @property
    def n_bins(self) -> int:
        """Regular bins plus the exact-match bin."""
        return len(self.bin_edges)


@dataclass
class HeadOutput:
    score: torch.Tensor  # 0-dim, differentiable
    per_query_term_signals: torch.Tensor

    def __post_init__(self):
        if not bool(torch.isfinite(self.score)):
            raise FloatingPointError("non-finite relevance score")

    def __float__(self) -> float:
        return self.score.item()


def k_max_pool(rows: torch.Tensor, k: int) -> torch.Tensor:
    """Keep the k largest values per row, sorted descending, -1-padded.

    rows: (..., n). Rows shorter than k are padded with -1 (the no-match
    sentinel) after their own values.
    """
    n = rows.shape[-1]
    if n >= k:
        return torch.topk(rows, k, dim=-1).values
    vals = torch.sort(rows, dim=-1, descending=True).values
    pad = torch.full((*rows.shape[:-1], k - n), PAD_VALUE, dtype=rows.dtype)
    return torch.cat([vals, pad], dim=-1)


class ScoringHead(nn.Module):
    """Common forward contract: (tensor, optional cls, optional per-term extras)."""

    cls_dim: int = 0

    @property
    def joint(self) -> bool:
        return self.cls_dim > 0

    def _take_cls(self, cls: torch.Tensor | None) -> torch.Tensor | None:
        if not self.joint:
            return None
        if cls is None:
            raise ValueError(
                f"{type(self).__name__} is a joint variant and needs a classification vector"
            )
        if cls.shape != (self.cls_dim,):
            raise ValueError(f"cls has shape {tuple(cls.shape)}, expected ({self.cls_dim},)")
        return cls

    def forward(
        self,
        tensor: SimilarityTensor,
        cls: torch.Tensor | None = None,
        query_vecs: torch.Tensor | None = None,
        query_idf: torch.Tensor | None = None,
    ) -> HeadOutput:
        raise NotImplementedError


class KnrmHead(ScoringHead):
    """Gaussian kernel pooling per channel, log soft-counts, dense combine."""

    def __init__(self, n_channels: int, cfg: KnrmConfig | None = None, cls_dim: int = 0):
        super().__init__()
        self.cfg = cfg or KnrmConfig()
        self.n_channels = n_channels
        self.cls_dim = cls_dim
        self.register_buffer("mus", torch.tensor(self.cfg.kernel_mus, dtype=DTYPE))
        self.register_buffer("sigmas", torch.tensor(self.cfg.kernel_sigmas, dtype=DTYPE))
        n_kernels = len(self.cfg.kernel_mus)
        self.dense = nn.Linear(n_channels * n_kernels + cls_dim, 1)
        self.to(DTYPE)

    def kernel_counts(self, values: torch.Tensor) -> torch.Tensor:
        """Soft match counts K[l, k, i] = sum_j exp(-(S[l,i,j]-mu_k)^2 / (2 sigma_k^2))."""
        diff = values.unsqueeze(1) - self.mus.view(1, -1, 1, 1)
        kern = torch.exp(-(diff**2) / (2.0 * self.sigmas.view(1, -1, 1, 1) ** 2))
        return kern.sum(dim=3)

    def forward(self, tensor, cls=None, query_vecs=None, query_idf=None) -> HeadOutput:
        counts = self.kernel_counts(tensor.values)  # (L, K, Q)
        log_counts = torch.log(torch.clamp(counts, min=self.cfg.epsilon))
        phi = log_counts.sum(dim=2)  # (L, K)
        feats = phi.reshape(-1)
        cls = self._take_cls(cls)
        if cls is not None:
            feats = torch.cat([feats, cls])
        score = self.dense(feats).squeeze(-1)
        signals = log_counts.permute(2, 0, 1).reshape(tensor.query_len, -1)
        return HeadOutput(score=score, per_query_term_signals=signals)


class PacrrHead(ScoringHead):
    """n-gram convolutions over channels, max over filters, k-max pooling.

    The query axis is padded (or truncated) to cfg.max_query_len with the
    -1 sentinel so the final dense combination has a fixed width; the
    document axis is padded to at least max(ngram_sizes) the same way.
    """

    def __init__(self, n_channels: int, cfg: PacrrConfig | None = None, cls_dim: int = 0):
        super().__init__()
        self.cfg = cfg or PacrrConfig()
        self.n_channels = n_channels
        self.cls_dim = cls_dim
        self.convs = nn.ModuleList(
            [nn.Conv2d(n_channels, self.cfg.filters_per_size, (n, n)) for n in self.cfg.ngram_sizes]
        )
        per_term = len(self.cfg.ngram_sizes) * self.cfg.k_max + (1 if self.cfg.use_idf else 0)
        self.dense = nn.Linear(self.cfg.max_query_len * per_term + cls_dim, 1)
        self.to(DTYPE)

    def _fix_query_axis(self, values: torch.Tensor) -> torch.Tensor:
        q_len, target = values.shape[1], self.cfg.max_query_len
        if q_len > target:
            return values[:, :target, :]
        if q_len < target:
            pad = torch.full(
                (values.shape[0], target - q_len, values.shape[2]), PAD_VALUE, dtype=values.dtype
            )
            return torch.cat([values, pad], dim=1)
        return values

    def _idf_column(self, query_idf: torch.Tensor | None, q_len: int) -> torch.Tensor:
        """Softmax-normalized IDF per real query term, 0 on padded rows."""
        target = self.cfg.max_query_len
        q_len = min(q_len, target)
        col = torch.zeros(target, dtype=DTYPE)
        if q_len == 0:
            return col.unsqueeze(1)
        if query_idf is None:
            query_idf = torch.zeros(q_len, dtype=DTYPE)
        col[:q_len] = torch.softmax(query_idf[:q_len].to(DTYPE), dim=0)
        return col.unsqueeze(1)

    def forward(self, tensor, cls=None, query_vecs=None, query_idf=None) -> HeadOutput:
        values = tensor.values
        min_doc = max(self.cfg.ngram_sizes)
        if values.shape[2] < min_doc:
            pad = torch.full(
                (values.shape[0], values.shape[1], min_doc - values.shape[2]),
                PAD_VALUE,
                dtype=values.dtype,
            )
            values = torch.cat([values, pad], dim=2)
        x = self._fix_query_axis(values).unsqueeze(0)  # (1, L, Qp, Dp)

        per_term = []
        for n, conv in zip(self.cfg.ngram_sizes, self.convs):
            left = (n - 1) // 2
            right = n - 1 - left
            padded = nn.functional.pad(x, (left, right, left, right), value=PAD_VALUE)
            strength = conv(padded).max(dim=1).values.squeeze(0)  # (Qp, Dp)
            per_term.append(k_max_pool(strength, self.cfg.k_max))
        signals = torch.cat(per_term, dim=1)  # (Qp, n_sizes * k_max)
        if self.cfg.use_idf:
            signals = torch.cat([signals, self._idf_column(query_idf, tensor.query_len)], dim=1)

        feats = signals.reshape(-1)
        cls = self._take_cls(cls)
        if cls is not None:
            feats = torch.cat([feats, cls])
        score = self.dense(feats).squeeze(-1)
        return HeadOutput(score=score, per_query_term_signals=signals)


class DrmmHead(ScoringHead):
    """Fixed-bucket matching histograms with a per-term scoring net.

    Histogram counts are integers, so the score is piecewise constant in
    the tensor values (no gradient flows into the encoder through the
    buckets); gradients do flow through the classification path in the
    joint variant and through all head parameters.
    """

    def __init__(
        self,
        n_channels: int,
        cfg: DrmmConfig | None = None,
        cls_dim: int = 0,
        query_dim: int | None = None,
    ):
        super().__init__()
        self.cfg = cfg or DrmmConfig()
        self.n_channels = n_channels
        self.cls_dim = cls_dim
        self.query_dim = query_dim
        self.register_buffer("edges", torch.tensor(self.cfg.bin_edges, dtype=DTYPE))
        widths = [n_channels * self.cfg.n_bins + cls_dim, *self.cfg.hidden_sizes]
        layers: list[nn.Module] = []
        for w_in, w_out in zip(widths, widths[1:]):
            layers.append(nn.Linear(w_in, w_out))
            if w_out != widths[-1]:
                layers.append(nn.Tanh())
        self.term_net = nn.Sequential(*layers)
        self.gate = nn.Linear(query_dim, 1, bias=False) if query_dim else None
        self.to(DTYPE)

    def histograms(self, values: torch.Tensor) -> torch.Tensor:
        """Counts h[l, i, b] of document cells per similarity bin."""
        n_layers, q_len, d_len = values.shape
        n_bins = self.cfg.n_bins
        flat = torch.clamp(values.detach(), -1.0, 1.0).reshape(n_layers * q_len, d_len)
        h = torch.zeros(n_layers * q_len, n_bins, dtype=DTYPE)
        if d_len:
            idx = torch.searchsorted(self.edges, flat.contiguous(), right=True) - 1
            idx = torch.clamp(idx, 0, n_bins - 2)
            exact = flat >= 1.0 - EXACT_MATCH_EPS
            idx = torch.where(exact, torch.full_like(idx, n_bins - 1), idx)
            h.scatter_add_(1, idx, torch.ones_like(flat))
        return h.reshape(n_layers, q_len, n_bins)

    def forward(self, tensor, cls=None, query_vecs=None, query_idf=None) -> HeadOutput:
        h = self.histograms(tensor.values)  # (L, Q, B)
        feats = torch.log1p(h).permute(1, 0, 2).reshape(tensor.query_len, -1)  # (Q, L*B)
        cls = self._take_cls(cls)
        if cls is not None:
            feats = torch.cat([feats, cls.unsqueeze(0).expand(feats.shape[0], -1)], dim=1)
        term_scores = self.term_net(feats).squeeze(-1)  # (Q,)
        if self.gate is not None and query_vecs is not None:
            gate_logits = self.gate(query_vecs.to(DTYPE)).squeeze(-1)
        else:
            gate_logits = torch.zeros(tensor.query_len, dtype=DTYPE)
        gates = torch.softmax(gate_logits, dim=0)
        score = (gates * term_scores).sum()
        return HeadOutput(score=score, per_query_term_signals=term_scores)


class VanillaClsHead(ScoringHead):
    """Affine map on the (split-averaged) classification vector alone."""

    def __init__(self, cls_dim: int):
        super().__init__()
        if cls_dim < 1:
            raise ValueError("classification head needs a positive cls dimension")
        self.cls_dim = cls_dim
        self.dense = nn.Linear(cls_dim, 1)
        self.to(DTYPE)

    def forward(self, tensor=None, cls=None, query_vecs=None, query_idf=None) -> HeadOutput:
        cls = self._take_cls(cls)
        score = self.dense(cls).squeeze(-1)
        return HeadOutput(score=score, per_query_term_signals=torch.zeros(0, dtype=DTYPE))


MODEL_NAMES = ("knrm", "pacrr", "drmm", "cedr_knrm", "cedr_pacrr", "cedr_drmm", "vanilla")


def build_head(
    name: str,
    n_channels: int,
    cls_dim: int = 0,
    query_dim: int | None = None,
    knrm_cfg: KnrmConfig | None = None,
    pacrr_cfg: PacrrConfig | None = None,
    drmm_cfg: DrmmConfig | None = None,
) -> ScoringHead:
    """Construct a head by model name; cedr_*/vanilla require cls_dim > 0."""
    if name not in MODEL_NAMES:
        raise ValueError(f"unknown model {name!r}, expected one of {MODEL_NAMES}")
    joint = name.startswith("cedr_") or name == "vanilla"
    if joint and cls_dim < 1:
        raise ValueError(f"{name} needs a contextualizer that provides a classification vector")
    effective_cls = cls_dim if joint else 0
    base = name.removeprefix("cedr_")
    if base == "knrm":
        return KnrmHead(n_channels, knrm_cfg, cls_dim=effective_cls)
    if base == "pacrr":
        return PacrrHead(n_channels, pacrr_cfg, cls_dim=effective_cls)
    if base == "drmm":
        return DrmmHead(n_channels, drmm_cfg, cls_dim=effective_cls, query_dim=query_dim)
    return VanillaClsHead(cls_dim)
