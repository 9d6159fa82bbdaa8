import math

import pytest
import torch

from ctxrank.heads import (
    DrmmConfig,
    DrmmHead,
    KnrmConfig,
    KnrmHead,
    PacrrConfig,
    PacrrHead,
    VanillaClsHead,
    build_head,
    k_max_pool,
)
from ctxrank.simtensor import SimilarityTensor

DT = torch.float64


def _tensor(values) -> SimilarityTensor:
    vals = torch.as_tensor(values, dtype=DT).clone()
    if vals.dim() == 2:
        vals = vals.unsqueeze(0)
    layers, n_q, n_d = vals.shape
    return SimilarityTensor(vals, layers, n_q, n_d)


def _kernel_oracle(row, mu, sigma):
    """Independent soft-count: plain-python sum of Gaussians."""
    return sum(math.exp(-((s - mu) ** 2) / (2 * sigma**2)) for s in row)


class TestKnrmKernels:
    def test_single_cell_at_center(self):
        head = KnrmHead(1, KnrmConfig(kernel_mus=(1.0,), kernel_sigmas=(0.001,)))
        counts = head.kernel_counts(_tensor([[1.0]]).values)
        assert float(counts[0, 0, 0]) == 1.0

    def test_off_center_cell_vanishes(self):
        head = KnrmHead(1, KnrmConfig(kernel_mus=(1.0,), kernel_sigmas=(0.001,)))
        counts = head.kernel_counts(_tensor([[1.0, 0.5]]).values)
        expected = _kernel_oracle([1.0, 0.5], 1.0, 0.001)
        assert float(counts[0, 0, 0]) == pytest.approx(expected, rel=1e-12)
        assert float(counts[0, 0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_two_cells_at_center(self):
        head = KnrmHead(1, KnrmConfig(kernel_mus=(0.5,), kernel_sigmas=(0.1,)))
        counts = head.kernel_counts(_tensor([[0.5, 0.5]]).values)
        assert float(counts[0, 0, 0]) == pytest.approx(2.0, abs=1e-12)

    def test_full_score_against_loop_oracle(self):
        torch.manual_seed(1)
        cfg = KnrmConfig()
        head = KnrmHead(2, cfg)
        tensor = _tensor(
            [
                [[0.9, -0.2, 0.4], [1.0, 0.1, 0.0]],
                [[0.3, 0.3, 0.3], [-0.9, 0.8, 0.2]],
            ]
        )
        out = head(tensor)
        # oracle: recompute phi with plain loops, then the affine map
        phi = []
        for layer in range(2):
            for mu, sigma in zip(cfg.kernel_mus, cfg.kernel_sigmas):
                total = 0.0
                for i in range(2):
                    row = [float(v) for v in tensor.values[layer, i]]
                    total += math.log(max(_kernel_oracle(row, mu, sigma), cfg.epsilon))
                phi.append(total)
        w = head.dense.weight.detach().numpy().ravel()
        b = float(head.dense.bias.detach())
        expected = sum(wi * fi for wi, fi in zip(w, phi)) + b
        assert float(out.score) == pytest.approx(expected, rel=1e-10)

    def test_adding_cell_at_mu_adds_exactly_one(self):
        head = KnrmHead(1, KnrmConfig(kernel_mus=(0.7,), kernel_sigmas=(0.1,)))
        base = head.kernel_counts(_tensor([[0.1, -0.5]]).values)
        more = head.kernel_counts(_tensor([[0.1, -0.5, 0.7]]).values)
        assert float(more[0, 0, 0] - base[0, 0, 0]) == pytest.approx(1.0, abs=1e-12)

    def test_empty_doc_finite(self):
        head = KnrmHead(1)
        out = head(_tensor(torch.zeros((1, 2, 0))))
        assert math.isfinite(float(out.score))

    def test_signals_shape(self):
        head = KnrmHead(3)
        out = head(_tensor(torch.zeros((3, 4, 5))))
        assert tuple(out.per_query_term_signals.shape) == (4, 33)


class TestKMaxPool:
    def test_sort_oracle(self):
        row = torch.tensor([0.9, 0.1, 0.5, 0.7], dtype=DT)
        assert k_max_pool(row, 2).tolist() == sorted(row.tolist(), reverse=True)[:2]
        assert k_max_pool(row, 2).tolist() == [0.9, 0.7]

    def test_pad_rule(self):
        row = torch.tensor([0.3], dtype=DT)
        assert k_max_pool(row, 2).tolist() == [0.3, -1.0]

    def test_sorted_and_membership(self):
        gen = torch.Generator().manual_seed(5)
        for _ in range(25):
            n = int(torch.randint(1, 12, (1,), generator=gen))
            k = int(torch.randint(1, 12, (1,), generator=gen))
            row = torch.rand(n, generator=gen, dtype=DT) * 2 - 1
            pooled = k_max_pool(row, k).tolist()
            assert pooled == sorted(pooled, reverse=True)
            source = set(row.tolist()) | {-1.0}
            assert all(v in source for v in pooled)


class TestPacrr:
    def test_identity_1x1_filter_reproduces_row(self):
        cfg = PacrrConfig(ngram_sizes=(1,), filters_per_size=1, k_max=4, max_query_len=2)
        head = PacrrHead(1, cfg)
        with torch.no_grad():
            head.convs[0].weight.fill_(1.0)
            head.convs[0].bias.fill_(0.0)
        tensor = _tensor([[0.9, 0.1, 0.5, 0.7], [0.2, 0.4, -0.3, 0.0]])
        out = head(tensor)
        for i in range(2):
            row = sorted(tensor.values[0, i].tolist(), reverse=True)
            assert out.per_query_term_signals[i].tolist() == pytest.approx(row)

    def test_short_doc_padded(self):
        cfg = PacrrConfig(ngram_sizes=(1,), filters_per_size=1, k_max=3, max_query_len=1)
        head = PacrrHead(1, cfg)
        with torch.no_grad():
            head.convs[0].weight.fill_(1.0)
            head.convs[0].bias.fill_(0.0)
        out = head(_tensor([[0.5]]))
        assert out.per_query_term_signals[0].tolist() == [0.5, -1.0, -1.0]

    def test_empty_doc_finite(self):
        head = PacrrHead(2, PacrrConfig(filters_per_size=2, k_max=3, max_query_len=4))
        out = head(_tensor(torch.zeros((2, 3, 0))))
        assert math.isfinite(float(out.score))

    def test_long_query_truncated(self):
        cfg = PacrrConfig(ngram_sizes=(1,), filters_per_size=1, k_max=2, max_query_len=2)
        head = PacrrHead(1, cfg)
        out = head(_tensor(torch.zeros((1, 5, 3))))
        assert out.per_query_term_signals.shape[0] == 2

    def test_idf_column_toggle(self):
        cfg = PacrrConfig(ngram_sizes=(1,), filters_per_size=1, k_max=2, max_query_len=3, use_idf=True)
        head = PacrrHead(1, cfg)
        tensor = _tensor(torch.zeros((1, 2, 2)))
        idf = torch.tensor([2.0, 0.0], dtype=DT)
        out = head(tensor, query_idf=idf)
        col = out.per_query_term_signals[:, -1]
        expect = torch.softmax(idf, dim=0)
        assert float(col[0]) == pytest.approx(float(expect[0]))
        assert float(col[2]) == 0.0  # padded row carries no idf mass


class TestDrmm:
    def test_histogram_counting_oracle(self):
        cfg = DrmmConfig()
        head = DrmmHead(1, cfg)
        row = [0.95, 1.0, -1.0, -0.05, 0.0, 1.0]
        h = head.histograms(torch.tensor([[row]], dtype=DT))[0, 0]

        def oracle(values):
            counts = [0] * 11
            for v in values:
                v = min(max(v, -1.0), 1.0)
                if v >= 1.0 - 1e-9:
                    counts[10] += 1
                    continue
                for b in range(10):
                    if cfg.bin_edges[b] <= v < cfg.bin_edges[b + 1]:
                        counts[b] += 1
                        break
            return counts

        assert h.tolist() == oracle(row)
        assert h[10] == 2.0  # the exact-match bin

    def test_exact_match_log_count(self):
        head = DrmmHead(1)
        h = head.histograms(torch.tensor([[[1.0, 1.0]]], dtype=DT))
        assert float(h[0, 0, 10]) == 2.0
        assert float(torch.log1p(h)[0, 0, 10]) == pytest.approx(math.log(3.0))

    def test_all_cells_one_bin(self):
        head = DrmmHead(1)
        h = head.histograms(torch.tensor([[[0.55, 0.5, 0.59]]], dtype=DT))[0, 0]
        assert float(h[7]) == 3.0 and float(h.sum()) == 3.0

    def test_histogram_mass_equals_doc_len(self):
        gen = torch.Generator().manual_seed(9)
        head = DrmmHead(3)
        vals = torch.rand((3, 4, 17), generator=gen, dtype=DT) * 2 - 1
        h = head.histograms(vals)
        assert torch.all(h.sum(dim=2) == 17)

    def test_empty_doc_finite_score(self):
        head = DrmmHead(2, query_dim=None)
        out = head(_tensor(torch.zeros((2, 3, 0))))
        assert math.isfinite(float(out.score))

    def test_gate_uses_query_vectors(self):
        torch.manual_seed(0)
        head = DrmmHead(1, query_dim=4)
        tensor = _random_tensor(1, 2, 5, seed=11)  # distinct per-term histograms
        qv_a = torch.randn(2, 4, dtype=DT)
        qv_b = torch.randn(2, 4, dtype=DT)
        out_a = head(tensor, query_vecs=qv_a)
        out_b = head(tensor, query_vecs=qv_b)
        # same per-term scores; only the gates differ between the two calls
        assert torch.allclose(out_a.per_query_term_signals, out_b.per_query_term_signals)
        assert out_a.score.item() != out_b.score.item()

    def test_gates_sum_to_one_weighting(self):
        torch.manual_seed(0)
        head = DrmmHead(1, query_dim=4)
        tensor = _tensor(torch.rand((1, 3, 5), dtype=DT) * 2 - 1)
        qv = torch.randn(3, 4, dtype=DT)
        out = head(tensor, query_vecs=qv)
        logits = head.gate(qv).squeeze(-1)
        gates = torch.softmax(logits, dim=0)
        expected = float((gates * out.per_query_term_signals).sum())
        assert float(out.score) == pytest.approx(expected, rel=1e-12)


class TestVanilla:
    def test_zero_weights_gives_bias(self):
        head = VanillaClsHead(4)
        with torch.no_grad():
            head.dense.weight.zero_()
            head.dense.bias.fill_(0.25)
        out = head(cls=torch.randn(4, dtype=DT))
        assert float(out.score) == pytest.approx(0.25)

    def test_affine_contract(self):
        head = VanillaClsHead(3)
        cls = torch.tensor([1.0, -2.0, 0.5], dtype=DT)
        w = head.dense.weight.detach().squeeze(0)
        b = float(head.dense.bias.detach())
        assert float(head(cls=cls).score) == pytest.approx(float(w @ cls) + b, rel=1e-12)

    def test_same_projection_same_score(self):
        head = VanillaClsHead(2)
        with torch.no_grad():
            head.dense.weight.copy_(torch.tensor([[1.0, 0.0]], dtype=DT))
        a = head(cls=torch.tensor([0.5, 9.0], dtype=DT))
        b = head(cls=torch.tensor([0.5, -3.0], dtype=DT))
        assert float(a.score) == pytest.approx(float(b.score))

    def test_missing_cls_rejected(self):
        with pytest.raises(ValueError, match="classification"):
            VanillaClsHead(4)(cls=None)


def _random_tensor(layers, n_q, n_d, seed=0):
    gen = torch.Generator().manual_seed(seed)
    vals = torch.rand((layers, n_q, n_d), generator=gen, dtype=DT) * 1.9 - 0.95
    return SimilarityTensor(vals, layers, n_q, n_d)


class TestJointAblationEquality:
    """Zeroing the cls input and its weights must recover the plain head."""

    def _align_dense(self, joint_dense, plain_dense, n_base):
        with torch.no_grad():
            plain_dense.weight.copy_(joint_dense.weight[:, :n_base])
            plain_dense.bias.copy_(joint_dense.bias)
            joint_dense.weight[:, n_base:] = 0.0

    def test_knrm(self):
        torch.manual_seed(2)
        joint = KnrmHead(2, cls_dim=6)
        plain = KnrmHead(2)
        n_base = 2 * 11
        self._align_dense(joint.dense, plain.dense, n_base)
        tensor = _random_tensor(2, 3, 5)
        cls = torch.zeros(6, dtype=DT)
        assert float(joint(tensor, cls=cls).score) == pytest.approx(
            float(plain(tensor).score), rel=1e-12
        )

    def test_pacrr(self):
        torch.manual_seed(3)
        cfg = PacrrConfig(filters_per_size=2, k_max=4, max_query_len=3)
        joint = PacrrHead(2, cfg, cls_dim=5)
        plain = PacrrHead(2, cfg)
        with torch.no_grad():
            for src, dst in zip(joint.convs, plain.convs):
                dst.weight.copy_(src.weight)
                dst.bias.copy_(src.bias)
        n_base = 3 * (3 * 4)
        self._align_dense(joint.dense, plain.dense, n_base)
        tensor = _random_tensor(2, 3, 6, seed=4)
        assert float(joint(tensor, cls=torch.zeros(5, dtype=DT)).score) == pytest.approx(
            float(plain(tensor).score), rel=1e-12
        )

    def test_drmm(self):
        torch.manual_seed(4)
        joint = DrmmHead(2, cls_dim=5, query_dim=4)
        plain = DrmmHead(2, query_dim=4)
        n_base = 2 * 11
        first_joint = joint.term_net[0]
        first_plain = plain.term_net[0]
        with torch.no_grad():
            first_plain.weight.copy_(first_joint.weight[:, :n_base])
            first_plain.bias.copy_(first_joint.bias)
            first_joint.weight[:, n_base:] = 0.0
            for j, p in zip(list(joint.term_net)[1:], list(plain.term_net)[1:]):
                if hasattr(j, "weight"):
                    p.weight.copy_(j.weight)
                    p.bias.copy_(j.bias)
            plain.gate.weight.copy_(joint.gate.weight)
        tensor = _random_tensor(2, 3, 6, seed=5)
        qv = torch.randn(3, 4, dtype=DT)
        assert float(joint(tensor, cls=torch.zeros(5, dtype=DT), query_vecs=qv).score) == pytest.approx(
            float(plain(tensor, query_vecs=qv).score), rel=1e-12
        )


class TestChannelGeneralization:
    @pytest.mark.parametrize("layers", [1, 4])
    @pytest.mark.parametrize("name", ["knrm", "pacrr", "drmm"])
    def test_heads_accept_any_channel_count(self, name, layers):
        torch.manual_seed(0)
        head = build_head(name, n_channels=layers, query_dim=8)
        out = head(_random_tensor(layers, 3, 7), query_vecs=torch.randn(3, 8, dtype=DT))
        assert math.isfinite(float(out.score))


class TestBuildHead:
    def test_joint_requires_cls(self):
        with pytest.raises(ValueError, match="classification"):
            build_head("cedr_knrm", n_channels=2, cls_dim=0)

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown model"):
            build_head("bm25", n_channels=1)

    def test_plain_head_ignores_cls_dim(self):
        head = build_head("knrm", n_channels=2, cls_dim=9)
        assert head.cls_dim == 0
