"""Linear / attention / transformer-block contracts and invariants."""

import numpy as np
import pytest

import crossfusion.tensor as T
from crossfusion.errors import ConfigError, DimensionError
from crossfusion.layers import (
    LinearParams,
    init_attention,
    init_linear,
    init_transformer_block,
    linear,
    multi_head_attention,
    named_params,
    transformer_block,
)
from crossfusion.tensor import Tensor, finite_diff_check
from oracles import attention_oracle


def tensor(data, rg=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=rg)


class TestLinear:
    def test_identity(self):
        p = LinearParams(tensor(np.eye(3)), tensor(np.zeros(3)))
        x = tensor(np.random.default_rng(0).standard_normal((4, 3)))
        np.testing.assert_array_equal(linear(p, x).data, x.data)

    def test_hand_case(self):
        p = LinearParams(tensor([[1.0, 1.0]]), tensor([0.0]))
        np.testing.assert_array_equal(linear(p, tensor([[2.0, 3.0]])).data, [[5.0]])

    def test_matches_matmul_oracle(self):
        rng = np.random.default_rng(1)
        w = rng.standard_normal((4, 3))
        b = rng.standard_normal(4)
        x = rng.standard_normal((6, 3))
        p = LinearParams(tensor(w), tensor(b))
        np.testing.assert_array_equal(linear(p, tensor(x)).data, x @ w.T + b)

    def test_width_mismatch(self):
        p = LinearParams(tensor(np.eye(3)), tensor(np.zeros(3)))
        with pytest.raises(DimensionError):
            linear(p, tensor(np.zeros((2, 4))))


class TestMultiHeadAttention:
    def test_single_token_weight_is_one(self):
        rng = np.random.default_rng(2)
        p = init_attention(rng, 8, 2)
        q = tensor(rng.standard_normal((1, 8)))
        kv = tensor(rng.standard_normal((1, 8)))
        out, w = multi_head_attention(p, q, kv, return_weights=True)
        np.testing.assert_allclose(w.data, 1.0, atol=1e-15)
        v = linear(p.v_proj, kv)
        np.testing.assert_allclose(out.data, linear(p.out_proj, v).data, atol=1e-12)

    def test_identical_kv_tokens_uniform_weights(self):
        rng = np.random.default_rng(3)
        p = init_attention(rng, 8, 4)
        q = tensor(rng.standard_normal((3, 8)))
        kv = tensor(np.tile(rng.standard_normal(8), (5, 1)))
        _, w = multi_head_attention(p, q, kv, return_weights=True)
        np.testing.assert_allclose(w.data, 0.2, atol=1e-12)

    def test_matches_unfused_oracle(self):
        rng = np.random.default_rng(4)
        p = init_attention(rng, 6, 3)
        q_in = rng.standard_normal((3, 6))
        kv_in = rng.standard_normal((4, 6))
        out, w = multi_head_attention(p, tensor(q_in), tensor(kv_in), return_weights=True)
        q = q_in @ p.q_proj.weight.data.T
        k = kv_in @ p.k_proj.weight.data.T
        v = kv_in @ p.v_proj.weight.data.T
        ref_out, ref_w = attention_oracle(q, k, v, 3)
        np.testing.assert_allclose(w.data, ref_w, atol=1e-12)
        ref_final = ref_out @ p.out_proj.weight.data.T + p.out_proj.bias.data
        np.testing.assert_allclose(out.data, ref_final, atol=1e-12)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        p = init_attention(rng, 8, 2)
        q = tensor(rng.standard_normal((6, 8)) * 5)
        kv = tensor(rng.standard_normal((9, 8)) * 5)
        _, w = multi_head_attention(p, q, kv, return_weights=True)
        np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_kv_permutation_equivariance(self):
        rng = np.random.default_rng(6)
        p = init_attention(rng, 8, 2)
        q = tensor(rng.standard_normal((4, 8)))
        kv = rng.standard_normal((7, 8))
        perm = rng.permutation(7)
        out1, w1 = multi_head_attention(p, q, tensor(kv), return_weights=True)
        out2, w2 = multi_head_attention(p, q, tensor(kv[perm]), return_weights=True)
        np.testing.assert_allclose(w2.data, w1.data[:, :, perm], atol=1e-12)
        np.testing.assert_allclose(out2.data, out1.data, atol=1e-12)

    def test_head_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            init_attention(np.random.default_rng(0), 6, 4)


class TestTransformerBlock:
    def test_zeroed_terminals_make_identity(self):
        rng = np.random.default_rng(7)
        p = init_transformer_block(rng, 8, 2, 2, dropout=0.0)
        for lp in (p.attn.out_proj, p.ffn.lin2):
            lp.weight.data[:] = 0.0
            lp.bias.data[:] = 0.0
        x = rng.standard_normal((5, 8))
        out, _ = transformer_block(p, tensor(x))
        np.testing.assert_array_equal(out.data, x)

    @pytest.mark.parametrize("n", [1, 5, 17])
    def test_shape_preserved(self, n):
        rng = np.random.default_rng(8)
        p = init_transformer_block(rng, 8, 4, 2, dropout=0.0)
        out, _ = transformer_block(p, tensor(rng.standard_normal((n, 8))))
        assert out.shape == (n, 8)

    def test_gradient_check(self):
        rng = np.random.default_rng(9)
        p = init_transformer_block(rng, 8, 2, 2, dropout=0.0)
        x = tensor(rng.standard_normal((4, 8)), rg=True)
        mix = tensor(rng.standard_normal((4, 8)))
        params = [x] + [t for _, t in named_params(p)]

        def f():
            out, _ = transformer_block(p, x)
            return T.sum_all(T.mul(out, mix))

        assert finite_diff_check(f, params, coords_per_param=3, seed=0) < 1e-4

    def test_dropout_only_fires_in_train_mode(self):
        rng = np.random.default_rng(10)
        p = init_transformer_block(rng, 8, 2, 2, dropout=0.5)
        x = tensor(rng.standard_normal((4, 8)))
        out1, _ = transformer_block(p, x)
        out2, _ = transformer_block(p, x)
        np.testing.assert_array_equal(out1.data, out2.data)
        drop = T.DropoutRng(3)
        out3, _ = transformer_block(p, x, dropout_rng=drop)
        assert not np.array_equal(out1.data, out3.data)


class TestNamedParams:
    def test_declaration_order_and_names(self):
        rng = np.random.default_rng(11)
        p = init_linear(rng, 2, 3)
        names = [n for n, _ in named_params(p)]
        assert names == ["weight", "bias"]
        blk = init_transformer_block(rng, 4, 2, 2, 0.1)
        names = [n for n, _ in named_params(blk)]
        assert names[0] == "norm1.gamma"
        assert "attn.q_proj.weight" in names
        assert names[-1] == "ffn.lin2.bias"
