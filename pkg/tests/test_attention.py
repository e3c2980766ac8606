"""Attention blocks against brute-force and dense straight-line oracles."""

import numpy as np
import pytest

from sparsewin.attention import (
    AttentionParams,
    attention_params,
    block_params,
    build_shift_mask,
    conv_local_layer,
    conv_params,
    global_block,
    layernorm_params,
    local_block,
    local_shift,
    multi_head_attention,
    relative_position_index,
    w_msa,
)
from sparsewin.reference import block_arrays, ref_local_block_dense
from sparsewin.sparsify import SparseSelection, select_topk
from sparsewin.tensor import LayerParams, Tensor, finite_diff_check
from sparsewin.windowing import make_grid

RNG = np.random.default_rng


def brute_force_attention(tokens, p: AttentionParams, mask=None):
    """Explicit score-matrix attention, one head at a time."""
    n, c = tokens.shape
    h = p.num_heads
    d = c // h
    q = tokens @ p.qkv["wq"].data + p.qkv["bq"].data
    k = tokens @ p.qkv["wk"].data + p.qkv["bk"].data
    v = tokens @ p.qkv["wv"].data + p.qkv["bv"].data
    out = np.zeros((n, c))
    for head in range(h):
        qs, ks, vs = (m[:, head * d:(head + 1) * d] for m in (q, k, v))
        scores = qs @ ks.T * p.scale
        if p.bias_table is not None:
            scores = scores + p.bias_table.data[
                relative_position_index(p.window), head]
        if mask is not None:
            scores = scores + mask
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        out[:, head * d:(head + 1) * d] = (e / e.sum(axis=1, keepdims=True)) @ vs
    return out @ p.out["w"].data + p.out["b"].data


def randomized_params(rng, dim, heads, window=None, bias_scale=0.0):
    p = attention_params(rng, dim, heads, window=window)
    for t in list(p.qkv.tensors.values()) + list(p.out.tensors.values()):
        t.data[...] = rng.standard_normal(t.shape) * 0.3
    if p.bias_table is not None and bias_scale:
        p.bias_table.data[...] = rng.standard_normal(p.bias_table.shape) * bias_scale
    return p


class TestMultiHeadAttention:
    def test_zero_query_key_gives_uniform_average_of_values(self):
        rng = RNG(0)
        p = randomized_params(rng, 8, 2)
        p.qkv["wq"].data[...] = 0.0
        p.qkv["bq"].data[...] = 0.0
        p.qkv["wk"].data[...] = 0.0
        p.qkv["bk"].data[...] = 0.0
        x = rng.standard_normal((1, 5, 8))
        out = multi_head_attention(Tensor(x), p).data[0]
        v = x[0] @ p.qkv["wv"].data + p.qkv["bv"].data
        expect = np.tile(v.mean(axis=0), (5, 1)) @ p.out["w"].data + p.out["b"].data
        np.testing.assert_allclose(out, expect, atol=1e-12)

    def test_single_token_returns_value_projection(self):
        rng = RNG(1)
        p = randomized_params(rng, 6, 2)
        p.out["w"].data[...] = np.eye(6)
        p.out["b"].data[...] = 0.0
        x = rng.standard_normal((1, 1, 6))
        out = multi_head_attention(Tensor(x), p).data[0, 0]
        np.testing.assert_allclose(
            out, x[0, 0] @ p.qkv["wv"].data + p.qkv["bv"].data, atol=1e-12)

    def test_matches_brute_force_oracle(self):
        rng = RNG(2)
        p = randomized_params(rng, 8, 2, window=3, bias_scale=0.5)
        x = rng.standard_normal((4, 9, 8))
        out = multi_head_attention(Tensor(x), p).data
        for i in range(4):
            np.testing.assert_allclose(
                out[i], brute_force_attention(x[i], p), atol=1e-10)

    def test_masked_matches_brute_force(self):
        rng = RNG(3)
        p = randomized_params(rng, 4, 2)
        x = rng.standard_normal((2, 4, 4))
        mask = np.where(rng.random((2, 4, 4)) < 0.3, -1e9, 0.0)
        mask[:, np.arange(4), np.arange(4)] = 0.0
        out = multi_head_attention(Tensor(x), p, mask=mask).data
        for i in range(2):
            np.testing.assert_allclose(
                out[i], brute_force_attention(x[i], p, mask=mask[i]), atol=1e-10)

    def test_mask_shape_mismatch(self):
        rng = RNG(4)
        p = randomized_params(rng, 4, 2)
        with pytest.raises(ValueError, match="mask"):
            multi_head_attention(Tensor(rng.standard_normal((2, 4, 4))), p,
                                 mask=np.zeros((2, 3, 3)))

    def test_window_permutation_equivariance(self):
        rng = RNG(5)
        p = randomized_params(rng, 6, 3, window=2, bias_scale=0.3)
        x = rng.standard_normal((5, 4, 6))
        out = w_msa(Tensor(x), p).data
        perm = rng.permutation(5)
        out_perm = w_msa(Tensor(x[perm]), p).data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            randomized_params(RNG(6), 6, 4)


class TestGlobalBlock:
    def test_matches_dense_reference(self):
        rng = RNG(7)
        block = block_params(rng, 8, 2, hidden=16)
        zbar = rng.standard_normal((2, 2, 8))
        from sparsewin.reference import ref_global_block
        out = global_block(Tensor(zbar), block).data
        np.testing.assert_allclose(
            out, ref_global_block(zbar, block_arrays(block)), atol=1e-10)

    def test_single_token_attention_path(self):
        rng = RNG(8)
        block = block_params(rng, 4, 2, hidden=8)
        zbar = rng.standard_normal((1, 1, 4))
        out = global_block(Tensor(zbar), block).data
        from sparsewin.reference import ref_global_block
        np.testing.assert_allclose(
            out, ref_global_block(zbar, block_arrays(block)), atol=1e-10)

    def test_gradient(self):
        rng = RNG(9)
        block = block_params(rng, 4, 2, hidden=8)
        w = rng.standard_normal((2, 2, 4))

        def f(t):
            return (global_block(t, block) * w).sum()

        assert finite_diff_check(f, Tensor(rng.standard_normal((2, 2, 4)))) < 1e-4


class TestShiftMask:
    def test_blocks_cross_region_attention(self):
        grid = make_grid(8, 8, 4)
        mask = build_shift_mask(grid, 2)
        assert mask.values.shape == (4, 16, 16)
        # window 0 sits in the interior: fully allowed
        np.testing.assert_array_equal(mask.values[0], 0.0)
        # the bottom-right window mixes four wrapped regions: some pairs banned
        assert (mask.values[3] < 0).any()
        diag = mask.values[:, np.arange(16), np.arange(16)]
        np.testing.assert_array_equal(diag, 0.0)

    def test_mask_symmetry(self):
        grid = make_grid(12, 8, 4)
        mask = build_shift_mask(grid, 2).values
        np.testing.assert_array_equal(mask, np.swapaxes(mask, 1, 2))


class TestLocalBlock:
    def _block_and_map(self, seed, h=8, w=8, c=6, m=4, heads=2):
        rng = RNG(seed)
        block = block_params(rng, c, heads, hidden=2 * c, window=m)
        block.core.bias_table.data[...] = rng.standard_normal(
            block.core.bias_table.shape) * 0.2
        z = rng.standard_normal((h, w, c))
        return block, z

    @pytest.mark.parametrize("shifted", [False, True])
    def test_keep_all_matches_dense_reference(self, shifted):
        block, z = self._block_and_map(10)
        sel = SparseSelection.full(4)
        out = local_block(Tensor(z), sel, block, shifted=shifted).data
        expect = ref_local_block_dense(z, block_arrays(block), shifted)
        np.testing.assert_allclose(out, expect, atol=1e-10)

    def test_keep_all_with_padding_matches_dense(self):
        block, _ = self._block_and_map(11)
        z = RNG(11).standard_normal((7, 5, 6))
        sel = SparseSelection.full(4)
        out = local_block(Tensor(z), sel, block, shifted=True).data
        expect = ref_local_block_dense(z, block_arrays(block), True)
        np.testing.assert_allclose(out, expect, atol=1e-10)

    def test_keep_none_is_identity(self):
        block, z = self._block_and_map(12)
        sel = SparseSelection(4, np.array([], dtype=np.intp),
                              np.zeros(4, dtype=bool))
        out = local_block(Tensor(z), sel, block, shifted=False)
        assert out.data.tobytes() == z.tobytes()

    @pytest.mark.parametrize("shifted", [False, True])
    def test_non_kept_windows_pass_through_bitwise(self, shifted):
        block, z = self._block_and_map(13)
        sel = select_topk(np.array([0.4, 0.1, 0.3, 0.2]), 0.5)
        np.testing.assert_array_equal(sel.kept_indices, [0, 2])
        out = local_block(Tensor(z), sel, block, shifted=shifted).data
        for win in range(4):
            y0, x0 = (win // 2) * 4, (win % 2) * 4
            block_in = z[y0:y0 + 4, x0:x0 + 4]
            block_out = out[y0:y0 + 4, x0:x0 + 4]
            if win in (0, 2):
                assert not np.array_equal(block_out, block_in)
            elif not shifted:
                assert block_out.tobytes() == block_in.tobytes()

    def test_non_kept_identity_under_shift(self):
        # with a shift, "window i" is defined on the shifted partition; check
        # pass-through there by diffing against a keep-all run
        block, z = self._block_and_map(14)
        full = local_block(Tensor(z), SparseSelection.full(4), block, shifted=True)
        sel = select_topk(np.array([0.1, 0.2, 0.3, 0.4]), 0.25)
        sparse = local_block(Tensor(z), sel, block, shifted=True)
        changed = ~np.isclose(sparse.data, z, atol=0.0)
        assert changed.any()
        assert not np.array_equal(full.data, sparse.data)

    def test_selection_grid_mismatch(self):
        block, z = self._block_and_map(15)
        with pytest.raises(ValueError, match="selection"):
            local_block(Tensor(z), SparseSelection.full(9), block)

    def test_shift_disabled_on_single_window(self):
        grid = make_grid(4, 4, 4)
        assert local_shift(grid, True) == 0
        assert local_shift(make_grid(8, 8, 4), True) == 2
        assert local_shift(make_grid(8, 8, 4), False) == 0

    def test_constant_map_stays_constant_under_shifted_block(self):
        rng = RNG(16)
        block = block_params(rng, 6, 2, hidden=12, window=4)
        block.core.bias_table.data[...] = rng.standard_normal(
            block.core.bias_table.shape)
        z = np.broadcast_to(rng.standard_normal(6), (8, 8, 6)).copy()
        out = local_block(Tensor(z), SparseSelection.full(4), block,
                          shifted=True).data
        spread = out.reshape(-1, 6).max(axis=0) - out.reshape(-1, 6).min(axis=0)
        np.testing.assert_allclose(spread, 0.0, atol=1e-12)

    def test_gradient_through_sparse_block(self):
        rng = RNG(17)
        block = block_params(rng, 4, 2, hidden=8, window=2)
        sel = select_topk(np.array([0.5, 0.1, 0.3, 0.1]), 0.5)
        w = rng.standard_normal((4, 4, 4))

        def f(t):
            return (local_block(t, sel, block, shifted=True) * w).sum()

        assert finite_diff_check(f, Tensor(rng.standard_normal((4, 4, 4)))) < 1e-4


class TestConvLayer:
    def test_center_tap_identity(self):
        rng = RNG(18)
        p = conv_params(rng, 5)
        p.depthwise.data[...] = 0.0
        p.depthwise.data[1, 1, :] = 1.0
        p.pointwise["w"].data[...] = np.eye(5)
        z = rng.standard_normal((6, 7, 5))
        np.testing.assert_allclose(conv_local_layer(Tensor(z), p).data, z,
                                   atol=1e-12)

    def test_all_zero_weights(self):
        p = conv_params(RNG(19), 3)
        p.depthwise.data[...] = 0.0
        p.pointwise["w"].data[...] = 0.0
        out = conv_local_layer(Tensor(np.ones((4, 4, 3))), p).data
        np.testing.assert_array_equal(out, 0.0)

    def test_matches_direct_loop_oracle(self):
        rng = RNG(20)
        p = conv_params(rng, 4)
        p.depthwise.data[...] = rng.standard_normal((3, 3, 4))
        p.pointwise["w"].data[...] = rng.standard_normal((4, 4))
        p.dw_bias.data[...] = rng.standard_normal(4)
        z = rng.standard_normal((5, 6, 4))
        from sparsewin.reference import ref_depthwise_pointwise
        expect = ref_depthwise_pointwise(z, {
            "depthwise": p.depthwise.data, "dw_bias": p.dw_bias.data,
            "pw": p.pointwise["w"].data, "pw_b": p.pointwise["b"].data})
        np.testing.assert_allclose(conv_local_layer(Tensor(z), p).data, expect,
                                   atol=1e-12)

    def test_batched_windows_match_per_window(self):
        rng = RNG(21)
        p = conv_params(rng, 3)
        p.depthwise.data[...] = rng.standard_normal((3, 3, 3))
        z = rng.standard_normal((4, 3, 3, 3))
        batched = conv_local_layer(Tensor(z), p).data
        for i in range(4):
            single = conv_local_layer(Tensor(z[i]), p).data
            np.testing.assert_allclose(batched[i], single, atol=1e-12)

    def test_conv_block_in_local_path(self):
        rng = RNG(22)
        block = block_params(rng, 4, 1, hidden=8, window=4, kind="convolution")
        z = rng.standard_normal((8, 8, 4))
        sel = select_topk(np.array([0.4, 0.3, 0.2, 0.1]), 0.5)
        out = local_block(Tensor(z), sel, block).data
        assert out.shape == z.shape
        y0, x0 = 4, 4  # window 3 dropped: untouched
        assert out[y0:, x0:].tobytes() == z[y0:, x0:].tobytes()
