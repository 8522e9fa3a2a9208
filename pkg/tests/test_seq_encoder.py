"""Temporal encodings and the query-token compressor."""

import logging

import numpy as np
import pytest

from dygenc import autodiff as ad
from dygenc.errors import ConfigError
from dygenc.seq_encoder import (
    QFormerParams,
    TemporalEncoder,
    attention_maps,
    compress,
    compress_batch,
    pair_attention,
    rope_angles,
    sinusoid_table,
    write_attention_csv,
)

from .helpers import finite_diff_check

D = 16


def rope(m_tokens, t):
    return TemporalEncoder(D, kind="rope").apply(ad.Tensor(m_tokens), t).data


class TestRope:
    def test_t_zero_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, D))
        assert np.array_equal(rope(x, [0, 0, 0]), x)

    def test_norm_preserved(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(8, D))
        y = rope(x, np.arange(8) * 5)
        assert np.abs(np.linalg.norm(y, axis=1) - np.linalg.norm(x, axis=1)).max() < 1e-12

    def test_relative_position_property(self):
        # <rope(u,i), rope(v,j)> depends only on i - j
        rng = np.random.default_rng(2)
        u, v = rng.normal(size=D), rng.normal(size=D)
        def dot(i, j):
            ru = rope(u[None, :], [i])[0]
            rv = rope(v[None, :], [j])[0]
            return ru @ rv
        assert abs(dot(3, 5) - dot(10, 12)) < 1e-10

    def test_odd_dim_rejected(self):
        with pytest.raises(ConfigError):
            TemporalEncoder(15, kind="rope")
        with pytest.raises(ConfigError):
            rope_angles([0], 7)


class TestApeAndTe:
    def test_ape_difference_is_exactly_the_sinusoid_difference(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, D))
        enc = TemporalEncoder(D, kind="ape")
        ya = enc.apply(ad.Tensor(x), [4]).data
        yb = enc.apply(ad.Tensor(x), [9]).data
        expected = sinusoid_table([4], D) - sinusoid_table([9], D)
        assert np.allclose(ya - yb, expected, atol=0)

    def test_te_learnable_and_differentiable(self):
        rng = np.random.default_rng(4)
        enc = TemporalEncoder(D, kind="te", rng=rng)
        x = ad.Tensor(rng.normal(size=(3, D)), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(3, D)))
        tensors = [x, enc._params["omega"], enc._params["phi"]]
        finite_diff_check(lambda: ad.tsum(ad.mul(enc.apply(x, [0, 2, 7]), w)), tensors, max_elems=12)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ConfigError):
            TemporalEncoder(D, kind="sinusoidal-ish")


@pytest.fixture
def qf():
    return QFormerParams(D, np.random.default_rng(5), k=1, num_layers=2, heads=4)


class TestCompress:
    @pytest.mark.parametrize("m", [1, 7, 46])
    def test_output_shape_is_k_by_d(self, qf, m):
        rng = np.random.default_rng(m)
        out = compress(ad.Tensor(rng.normal(size=(m, D))), qf)
        assert out.shape == (1, D)

    @pytest.mark.parametrize("k", [2, 4])
    def test_output_shape_multi_query(self, k):
        p = QFormerParams(D, np.random.default_rng(0), k=k)
        out = compress(ad.Tensor(np.random.default_rng(1).normal(size=(5, D))), p)
        assert out.shape == (k, D)

    def test_uniform_attention_averages_projected_values(self):
        # zero query projection forces equal logits; the attended output is
        # then w_o(mean of value-projected inputs) + b_o
        p = QFormerParams(D, np.random.default_rng(7), k=2, num_layers=1, heads=4)
        p.blk(0, "cross", "wq").data[:] = 0.0
        rng = np.random.default_rng(8)
        tokens = ad.Tensor(rng.normal(size=(6, D)))
        xq = ad.Tensor(rng.normal(size=(2, D)))
        pair_q = np.repeat(np.arange(2, dtype=np.int64), 6)
        pair_kv = np.tile(np.arange(6, dtype=np.int64), 2)
        out = pair_attention(xq, tokens, pair_q, pair_kv, p, 0, "cross").data
        v = tokens.data @ p.blk(0, "cross", "wv").data + p.blk(0, "cross", "bv").data
        expected = v.mean(axis=0) @ p.blk(0, "cross", "wo").data + p.blk(0, "cross", "bo").data
        assert np.allclose(out[0], expected, atol=1e-12)
        assert np.allclose(out[1], expected, atol=1e-12)

    def test_duplicate_tokens_change_nothing(self, qf):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(5, D))
        doubled = np.repeat(x, 2, axis=0)
        a = compress(ad.Tensor(x), qf).data
        b = compress(ad.Tensor(doubled), qf).data
        assert np.abs(a - b).max() < 1e-10

    def test_k_larger_than_m_warns_but_works(self, caplog):
        p = QFormerParams(D, np.random.default_rng(10), k=4)
        with caplog.at_level(logging.WARNING, logger="dygenc.seq_encoder"):
            out = compress(ad.Tensor(np.random.default_rng(1).normal(size=(2, D))), p)
        assert out.shape == (4, D)
        assert any("k=4" in r.getMessage() for r in caplog.records)

    def test_batched_equals_per_sample(self, qf):
        rng = np.random.default_rng(11)
        xs = [rng.normal(size=(m, D)) for m in (3, 1, 6)]
        token_sample = np.concatenate([np.full(len(x), i, dtype=np.int64) for i, x in enumerate(xs)])
        batched, _ = compress_batch(ad.Tensor(np.concatenate(xs)), token_sample, 3, qf)
        singles = np.concatenate([compress(ad.Tensor(x), qf).data for x in xs])
        assert np.allclose(batched.data, singles, atol=1e-12)

    def test_gradients_through_temporal_and_compress(self):
        p = QFormerParams(8, np.random.default_rng(12), k=1, num_layers=1, heads=2)
        enc = TemporalEncoder(8, kind="te", rng=np.random.default_rng(13))
        x = ad.Tensor(np.random.default_rng(14).normal(size=(4, 8)), requires_grad=True)
        w = ad.Tensor(np.random.default_rng(15).normal(size=(1, 8)))
        tensors = [x, enc._params["omega"]] + list(p.params().values())
        worst = finite_diff_check(
            lambda: ad.tsum(ad.mul(compress(enc.apply(x, [0, 3, 4, 9]), p), w)),
            tensors,
            max_elems=6,
        )
        assert worst < 1e-4

    def test_rope_gradcheck_through_compress(self):
        p = QFormerParams(8, np.random.default_rng(16), k=2, num_layers=1, heads=2)
        enc = TemporalEncoder(8, kind="rope")
        x = ad.Tensor(np.random.default_rng(17).normal(size=(3, 8)), requires_grad=True)
        w = ad.Tensor(np.random.default_rng(18).normal(size=(2, 8)))
        worst = finite_diff_check(
            lambda: ad.tsum(ad.mul(compress(enc.apply(x, [0, 2, 7]), p), w)),
            [x, p._params["query"]],
            max_elems=8,
        )
        assert worst < 1e-4


class TestAttentionMaps:
    def test_two_layers_four_heads_gives_eight_maps(self, qf):
        maps = attention_maps(ad.Tensor(np.random.default_rng(19).normal(size=(5, D))), qf)
        assert len(maps) == 8
        assert {(l, h) for l, h, _ in maps} == {(l, h) for l in range(2) for h in range(4)}

    def test_rows_sum_to_one(self, qf):
        maps = attention_maps(ad.Tensor(np.random.default_rng(20).normal(size=(9, D))), qf)
        for _, _, w in maps:
            assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9

    def test_single_frame_weights_are_one(self, qf):
        maps = attention_maps(ad.Tensor(np.random.default_rng(21).normal(size=(1, D))), qf)
        for _, _, w in maps:
            assert np.allclose(w, 1.0)

    def test_csv_format(self, qf, tmp_path):
        maps = attention_maps(ad.Tensor(np.random.default_rng(22).normal(size=(3, D))), qf)
        path = tmp_path / "maps.csv"
        write_attention_csv(maps, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "layer,head,query_index,frame_index,weight"
        assert len(lines) == 1 + 8 * 1 * 3
        layer, head, qi, fi, w = lines[1].split(",")
        assert (layer, head, qi, fi) == ("0", "0", "0", "0") and 0.0 <= float(w) <= 1.0
