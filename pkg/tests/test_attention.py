import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itasim.attention import (
    FloatWeights,
    HeadWeights,
    ShapeError,
    WeightSet,
    attention_head,
    attention_head_unfused,
    dequantize_weights,
    float_golden_attention,
    multi_head_attention,
    thread_count,
    tiled_matmul,
    tiled_matmul_codes,
)
from itasim.config import AcceleratorConfig, AttentionDims
from itasim.harness import random_workload, run_attention_error
from itasim.quant import QuantizedMatrix, RequantParams, dequantize, requantize
from itasim.reference import naive_attention, naive_matmul
from itasim.softmax import streaming_softmax

CFG = AcceleratorConfig()
int8s = st.integers(-128, 127)


def rand_codes(seed, shape):
    return np.random.default_rng(seed).integers(-128, 128, shape)


class TestTiledMatmul:
    def test_identity(self):
        a = rand_codes(0, (64, 64))
        assert np.array_equal(tiled_matmul_codes(a, np.eye(64, dtype=int)), a)

    def test_full_inner_bound(self):
        acc = tiled_matmul_codes(np.full((1, 256), 127), np.full((256, 1), 127))
        assert acc[0, 0] == 127 * 127 * 256 == 4129024

    def test_inner_above_bound_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            tiled_matmul_codes(np.ones((1, 257)), np.ones((257, 1)))

    def test_bound_value(self):
        assert CFG.max_inner_dim == 256
        assert AcceleratorConfig(D=20).max_inner_dim == 16

    def test_narrow_accumulator_lowers_bound(self):
        cfg = AcceleratorConfig(D=18, M=4)
        assert cfg.max_inner_dim < 8
        with pytest.raises(ValueError):
            tiled_matmul_codes(np.full((1, 8), 127), np.full((8, 1), 127), cfg=cfg)

    def test_edge_tiles_padded(self):
        a, b = rand_codes(1, (70, 70)), rand_codes(2, (70, 70))
        bias = rand_codes(3, (70,))
        assert np.array_equal(tiled_matmul_codes(a, b, bias), naive_matmul(a, b, bias))

    def test_inner_mismatch(self):
        with pytest.raises(ValueError):
            tiled_matmul_codes(np.ones((2, 3)), np.ones((4, 2)))

    def test_bias_length_checked(self):
        with pytest.raises(ValueError):
            tiled_matmul_codes(np.ones((2, 3)), np.ones((3, 2)), bias=[1, 2, 3])

    def test_scale_is_product(self):
        acc = tiled_matmul(QuantizedMatrix(np.ones((2, 2), int), 0.5), QuantizedMatrix(np.ones((2, 2), int), 0.25))
        assert acc.scale == 0.125 and acc.values.tolist() == [[2, 2], [2, 2]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 40), st.sampled_from([1, 3, 8, 16]), st.data())
    def test_matches_naive_any_tile(self, r, k, c, m, data):
        seed = data.draw(st.integers(0, 2**32))
        a, b = rand_codes(seed, (r, k)), rand_codes(seed + 1, (k, c))
        assert np.array_equal(tiled_matmul_codes(a, b, cfg=AcceleratorConfig(M=m)), a @ b)


def unit_head(E, P, wq=None, wk=None, wv=None, qk_shift=0):
    eye = lambda: QuantizedMatrix(np.eye(E, P, dtype=int), 1.0)  # noqa: E731
    zero = np.zeros(P, dtype=int)
    rq = {s: RequantParams.unit() for s in ("q", "k", "v", "av")}
    rq["qk"] = RequantParams(1, qk_shift)
    return HeadWeights(wq or eye(), wk or eye(), wv or eye(), zero, zero, zero, rq)


class TestAttentionHead:
    def test_single_token_probability_is_one(self):
        x = QuantizedMatrix(rand_codes(4, (1, 8)), 1.0)
        res = attention_head(x, unit_head(8, 8, qk_shift=10))
        assert res.probs.tolist() == [[255]]

    def test_probs_equal_standalone_softmax_of_scores(self):
        x, w = random_workload(AttentionDims(100, 32, 16, 1), seed=3)
        res = attention_head(x, w.heads[0])
        assert np.array_equal(res.probs, streaming_softmax(res.scores, CFG.M))
        raw = naive_matmul(res.q.codes, res.k.codes.T)
        assert np.array_equal(res.scores, requantize(raw, w.heads[0].requant["qk"]))

    @pytest.mark.parametrize("S", [1, 63, 64, 65, 130])
    def test_fused_equals_unfused(self, S):
        x, w = random_workload(AttentionDims(S, 24, 8, 1), seed=S)
        fused = attention_head(x, w.heads[0])
        out, probs = attention_head_unfused(x, w.heads[0])
        assert fused.output == out
        assert np.array_equal(fused.probs, probs)

    def test_one_trace_block_per_row_tile(self):
        x, w = random_workload(AttentionDims(130, 16, 8, 1), seed=5)
        trace = attention_head(x, w.heads[0]).trace
        assert [b["rows"] for b in trace.blocks] == [[0, 64], [64, 128], [128, 130]]

    def test_wrong_input_shape(self):
        x, w = random_workload(AttentionDims(8, 8, 8, 1), seed=0)
        with pytest.raises(ShapeError) as err:
            attention_head(x, w.heads[0], dims=AttentionDims(9, 8, 8, 1))
        assert err.value.tensor == "x"


class TestMultiHead:
    def test_identity_output_projection(self):
        x, w = random_workload(AttentionDims(20, 16, 16, 1), seed=9)
        w.wo = QuantizedMatrix(np.eye(16, dtype=int), 1.0)
        w.bo = np.zeros(16, dtype=int)
        w.out_requant = RequantParams.unit()
        res = multi_head_attention(x, w)
        assert np.array_equal(res.output.codes, res.heads[0].output.codes)

    def test_head_permutation(self):
        dims = AttentionDims(40, 24, 8, 3)
        x, w = random_workload(dims, seed=12)
        base = multi_head_attention(x, w, dims=dims)
        order = [2, 0, 1]
        rows = np.concatenate([np.arange(h * 8, h * 8 + 8) for h in order])
        perm = WeightSet([w.heads[h] for h in order], QuantizedMatrix(w.wo.codes[rows], w.wo.scale),
                         w.bo, w.out_requant, w.logit_scale)
        swapped = multi_head_attention(x, perm, dims=dims)
        assert swapped.output == base.output
        assert all(np.array_equal(swapped.attention_probs[i], base.attention_probs[h]) for i, h in enumerate(order))

    def test_matches_naive_reference(self):
        dims = AttentionDims(70, 40, 24, 2)
        x, w = random_workload(dims, seed=21)
        out, probs = naive_attention(x, w, CFG.M)
        res = multi_head_attention(x, w, dims=dims)
        assert res.output == out
        assert all(np.array_equal(a, b) for a, b in zip(res.attention_probs, probs))

    @pytest.mark.parametrize("M", [8, 16])
    def test_matches_naive_other_tile_sizes(self, M):
        dims = AttentionDims(37, 20, 12, 2)
        x, w = random_workload(dims, seed=M)
        out, _ = naive_attention(x, w, part_width=M)
        assert multi_head_attention(x, w, AcceleratorConfig(M=M), dims).output == out

    def test_thread_count_does_not_change_result(self):
        dims = AttentionDims(64, 32, 16, 4)
        x, w = random_workload(dims, seed=33)
        one = multi_head_attention(x, w, dims=dims, threads=1)
        many = multi_head_attention(x, w, dims=dims, threads=4)
        assert one.output == many.output

    def test_thread_env(self, monkeypatch):
        monkeypatch.setenv("ITA_SIM_THREADS", "3")
        assert thread_count() == 3
        assert thread_count(2) == 2
        monkeypatch.setenv("ITA_SIM_THREADS", "many")
        with pytest.raises(ValueError):
            thread_count()

    def test_head_count_mismatch(self):
        x, w = random_workload(AttentionDims(8, 8, 8, 2), seed=1)
        with pytest.raises(ValueError):
            multi_head_attention(x, w, dims=AttentionDims(8, 8, 8, 3))

    def test_bad_weight_shape_names_tensor(self):
        x, w = random_workload(AttentionDims(8, 8, 8, 1), seed=1)
        w.heads[0].wk = QuantizedMatrix(np.zeros((8, 7), int), 1.0)
        with pytest.raises(ShapeError) as err:
            multi_head_attention(x, w)
        assert err.value.tensor == "head0.wk"


class TestFloatGolden:
    def test_zero_logits_give_uniform(self):
        S, E, P = 5, 4, 3
        z = [np.zeros((E, P))]
        fw = FloatWeights(z, z, [np.ones((E, P))], [np.zeros(P)], [np.zeros(P)], [np.zeros(P)],
                          np.ones((P, E)), np.zeros(E), 1.0)
        out, probs, _ = float_golden_attention(np.ones((S, E)), fw)
        assert np.allclose(probs[0], 1 / S)
        assert np.allclose(out, P * E)

    def test_rows_sum_to_one(self):
        dims = AttentionDims(30, 16, 8, 2)
        x, w = random_workload(dims, seed=2)
        _, probs, _ = float_golden_attention(dequantize(x), dequantize_weights(w, x.scale), dims)
        for p in probs:
            assert np.allclose(p.sum(axis=1), 1.0)

    def test_integer_model_tracks_float_softmax(self):
        dims = AttentionDims(64, 64, 64, 1)
        x, w = random_workload(dims, seed=7)
        report = run_attention_error(x, w, dims)
        assert report.softmax_mae < 2e-2

    def test_calibrated_qk_targets_softmax_scale(self):
        x, w = random_workload(AttentionDims(16, 16, 16, 1), seed=4)
        assert w.logit_scale == pytest.approx(0.25)
        assert w.heads[0].requant["qk"].output_scale == pytest.approx(np.log(2) / 32)
