import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hdiformer.ann_attention import (MASK_VALUE, PatchEmbed, PatchMerging, RelativePositionEmbedding,
                                     RelativeSemanticEmbedding, SESTBlock, WindowLayout, layout_for,
                                     relative_position_index, relative_semantic_distance, rse,
                                     semsa_weights, sest_block_pair, window_partition, window_reverse)
from hdiformer.errors import ShapeError
from hdiformer.numcore import Tape, Tensor, backward, finite_diff_check, precision


def test_semantic_distance_example():
    a = relative_semantic_distance(Tensor([[1.0], [4.0]])).data
    assert a[..., 0].tolist() == [[0.0, -3.0], [3.0, 0.0]]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 7), st.integers(1, 5), st.integers(0, 10_000))
def test_semantic_distance_antisymmetric(n, c, seed):
    x = np.random.default_rng(seed).standard_normal((n, c))
    a = relative_semantic_distance(Tensor(x)).data
    np.testing.assert_allclose(a, -a.transpose(1, 0, 2))
    assert np.all(np.diagonal(a, axis1=0, axis2=1) == 0)


def test_rse_matches_scalar_formula():
    with precision(64):
        rng = np.random.default_rng(1)
        mlp = RelativeSemanticEmbedding(rng, 8)
        x = rng.standard_normal((5, 8))
        s = rse(Tensor(x), mlp).data
        w1, b1 = mlp.inner.weight.data, mlp.inner.bias.data
        w2, b2 = mlp.outer.weight.data, mlp.outer.bias.data
        for i in range(5):
            for j in range(i, 5):
                ref = ((x[i] - x[j]) @ w1 + b1) @ w2 + b2
                # evaluated on i <= j, mirrored below the diagonal
                assert abs(s[i, j] - ref[0]) < 1e-12
                assert s[j, i] == s[i, j]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_rse_symmetric(n, seed):
    rng = np.random.default_rng(seed)
    s = RelativeSemanticEmbedding(rng, 4)(Tensor(rng.standard_normal((3, n, 4)))).data
    assert s.shape == (3, n, n)
    np.testing.assert_array_equal(s, s.transpose(0, 2, 1))


def naive_attention(q, k):
    d = q.shape[-1]
    logits = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    e = np.exp(logits - logits.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def test_semsa_reduces_to_plain_attention():
    with precision(64):
        rng = np.random.default_rng(2)
        q, k = rng.standard_normal((2, 3, 6, 4)), rng.standard_normal((2, 3, 6, 4))
        sem = rng.standard_normal((2, 6, 6))
        w = semsa_weights(Tensor(q), Tensor(k), np.zeros((3, 6, 6)), sem, lam1=1.0, lam2=0.0).data
        np.testing.assert_allclose(w, naive_attention(q, k), atol=1e-12)


def test_semsa_biases_add_to_logits():
    with precision(64):
        rng = np.random.default_rng(3)
        q, k = rng.standard_normal((1, 2, 4, 3)), rng.standard_normal((1, 2, 4, 3))
        pos, sem = rng.standard_normal((2, 4, 4)), rng.standard_normal((1, 4, 4))
        _, logits = semsa_weights(Tensor(q), Tensor(k), pos, sem, 0.5, 2.0, return_logits=True)
        ref = q @ np.swapaxes(k, -1, -2) / math.sqrt(3) + 0.5 * pos + 2.0 * sem[:, None]
        np.testing.assert_allclose(logits.data, ref, atol=1e-12)


def test_semsa_rows_sum_to_one():
    rng = np.random.default_rng(4)
    w = semsa_weights(Tensor(rng.standard_normal((3, 2, 9, 4)) * 30),
                      Tensor(rng.standard_normal((3, 2, 9, 4)) * 30)).data
    np.testing.assert_allclose(w.sum(-1), 1.0, atol=1e-5)
    assert np.all(w >= 0)


def test_window_count_and_shapes():
    layout = WindowLayout(8, 8, 4, 0)
    x = np.arange(2 * 8 * 8 * 3, dtype=float).reshape(2, 8, 8, 3)
    w = window_partition(Tensor(x), layout)
    assert layout.n_windows == 4 and w.shape == (8, 16, 3)
    assert layout.mask is None


def label_grid_partition(h, w, m, s):
    """Reference partition of pixel labels by explicit index arithmetic."""
    labels = np.arange(h * w).reshape(h, w)
    out = []
    for wy in range(h // m):
        for wx in range(w // m):
            out.append([labels[(wy * m + i + s) % h, (wx * m + j + s) % w]
                        for i in range(m) for j in range(m)])
    return np.array(out)


@pytest.mark.parametrize("h,w,m,s", [(8, 8, 4, 0), (8, 8, 4, 2), (4, 12, 2, 1), (6, 9, 3, 1)])
def test_partition_matches_index_oracle(h, w, m, s):
    layout = WindowLayout(h, w, m, s)
    x = np.arange(h * w, dtype=float).reshape(1, h, w, 1)
    got = window_partition(Tensor(x, dtype=np.float64), layout).data[..., 0]
    np.testing.assert_array_equal(got, label_grid_partition(h, w, m, s))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 3, 4]), st.data())
def test_partition_reverse_identity(nh, nw, m, data):
    s = data.draw(st.integers(0, m - 1))
    layout = WindowLayout(nh * m, nw * m, m, s)
    x = np.random.default_rng(0).standard_normal((2, nh * m, nw * m, 3))
    back = window_reverse(window_partition(Tensor(x), layout), layout, 2).data
    np.testing.assert_array_equal(back, Tensor(x).data)


def test_shift_mask_blocks_cross_region_pairs():
    h = w = 8
    m, s = 4, 2
    mask = WindowLayout(h, w, m, s).mask
    # region label per pixel after the cyclic shift, built independently
    ry = np.digitize(np.arange(h), [h - m, h - s])
    rx = np.digitize(np.arange(w), [w - m, w - s])
    region = ry[:, None] * 3 + rx[None, :]
    part = window_partition(Tensor(region[None, :, :, None].astype(float), dtype=np.float64),
                            WindowLayout(h, w, m, 0)).data[..., 0]
    expected = np.where(part[:, :, None] != part[:, None, :], MASK_VALUE, 0.0)
    np.testing.assert_array_equal(mask, expected)
    assert np.all(mask[0] == 0)  # top-left window is a single region


def test_relative_position_index_oracle():
    m = 3
    idx = relative_position_index(m)
    for a in range(m * m):
        for b in range(m * m):
            dy = a // m - b // m + m - 1
            dx = a % m - b % m + m - 1
            assert idx[a, b] == dy * (2 * m - 1) + dx
    assert idx.max() == (2 * m - 1) ** 2 - 1


def test_relative_position_bias_shape_and_lookup():
    rpe = RelativePositionEmbedding(np.random.default_rng(0), 4, 3)
    b = rpe().data
    assert b.shape == (3, 16, 16)
    centre = (2 * 4 - 1) ** 2 // 2
    np.testing.assert_array_equal(np.diagonal(b, axis1=1, axis2=2), np.repeat(rpe.table.data[centre][:, None], 16, 1))


def test_layout_clamps_small_grids_and_pads():
    layout, pad = layout_for(2, 2, 4, shifted=True)
    assert (layout.window, layout.shift, pad) == (2, 0, (0, 0))
    layout, pad = layout_for(30, 40, 8, shifted=True)
    assert (layout.height, layout.width, layout.shift, pad) == (32, 40, 4, (2, 0))


def test_bad_layout_rejected():
    with pytest.raises(ShapeError):
        WindowLayout(6, 8, 4)
    with pytest.raises(ShapeError):
        WindowLayout(8, 8, 4, 4)


def test_block_preserves_shape_on_padded_map():
    rng = np.random.default_rng(5)
    blk = SESTBlock(rng, 8, 2, 4, shifted=True)
    x = Tensor(rng.standard_normal((1, 6, 10, 8)))
    assert blk(x).shape == (1, 6, 10, 8)


def test_block_injection_of_zero_is_identical():
    rng = np.random.default_rng(6)
    blk = SESTBlock(rng, 8, 2, 2, shifted=True)
    x = Tensor(rng.standard_normal((1, 4, 4, 8)))
    plain = blk(x).data
    state = blk.begin(x)
    injected = blk.finish(state, np.zeros(state["logits"].shape)).data
    np.testing.assert_array_equal(plain, injected)


def test_block_pair_gradient_check():
    with precision(64):
        rng = np.random.default_rng(7)
        blocks = [SESTBlock(rng, 8, 2, 2, shifted=False), SESTBlock(rng, 8, 2, 2, shifted=True)]
        target = rng.standard_normal((16, 8))
        y = Tensor(rng.standard_normal((16, 8)))

        def loss(t):
            out = sest_block_pair(t, blocks)
            return ((out - target) * (out - target)).sum()

        err = finite_diff_check(loss, y)
        assert err <= 1e-4, err


def test_block_pair_parameter_gradients_flow():
    rng = np.random.default_rng(8)
    blocks = [SESTBlock(rng, 8, 2, 2, shifted=False), SESTBlock(rng, 8, 2, 2, shifted=True)]
    with Tape() as tape:
        out = sest_block_pair(Tensor(rng.standard_normal((16, 8))), blocks)
        loss = (out * out).sum()
    backward(loss, tape)
    for blk in blocks:
        for name, p in blk.named_parameters():
            assert p.grad is not None and np.isfinite(p.grad).all(), name
        assert np.abs(blk.attn.rse.inner.weight.grad).sum() > 0


def test_patch_embed_and_merging_shapes():
    rng = np.random.default_rng(9)
    emb = PatchEmbed(rng, 4, 3, 16)
    x = emb(Tensor(rng.standard_normal((2, 16, 24, 3))))
    assert x.shape == (2, 4, 6, 16)
    y = PatchMerging(rng, 16)(x)
    assert y.shape == (2, 2, 3, 32)
    with pytest.raises(ShapeError):
        PatchMerging(rng, 32)(y)


def test_patch_merging_gathers_2x2_neighbours():
    rng = np.random.default_rng(10)
    pm = PatchMerging(rng, 1)
    x = np.arange(16, dtype=float).reshape(1, 4, 4, 1)
    # inspect the concatenated 4C vector that feeds the norm
    with Tape() as tape:
        pm(Tensor(x, requires_grad=True))
    ln_in = [n for n in tape.nodes if n.op == "layer_norm"][0].inputs[0].data
    assert sorted(ln_in[0, 0, 0].tolist()) == [0, 1, 4, 5]


def test_identical_tokens_give_constant_rse():
    with precision(64):
        rng = np.random.default_rng(12)
        mlp = RelativeSemanticEmbedding(rng, 4)
        mlp.inner.bias.data[...] = rng.standard_normal(mlp.inner.bias.shape)
        s = mlp(Tensor(np.tile(rng.standard_normal(4), (6, 1)))).data
        at_zero = (mlp.inner.bias.data @ mlp.outer.weight.data + mlp.outer.bias.data)[0]
        np.testing.assert_allclose(s, at_zero, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50), st.integers(0, 10_000))
def test_softmax_shift_invariance(c, seed):
    with precision(64):
        rng = np.random.default_rng(seed)
        q, k = rng.standard_normal((2, 2, 5, 3)), rng.standard_normal((2, 2, 5, 3))
        base = semsa_weights(Tensor(q), Tensor(k)).data
        shifted = semsa_weights(Tensor(q), Tensor(k), extra=np.full((2, 2, 5, 5), c)).data
        np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_token_permutation_equivariance():
    with precision(64):
        rng = np.random.default_rng(13)
        q, k = rng.standard_normal((1, 2, 6, 3)), rng.standard_normal((1, 2, 6, 3))
        sem = rng.standard_normal((1, 6, 6))
        perm = rng.permutation(6)
        w = semsa_weights(Tensor(q), Tensor(k), None, sem).data
        wp = semsa_weights(Tensor(q[:, :, perm]), Tensor(k[:, :, perm]), None,
                           sem[:, perm][:, :, perm]).data
        np.testing.assert_allclose(wp, w[:, :, perm][:, :, :, perm], atol=1e-12)


def test_masked_pairs_get_negligible_weight():
    layout = WindowLayout(8, 8, 4, 2)
    rng = np.random.default_rng(14)
    q, k = rng.standard_normal((4, 1, 16, 4)), rng.standard_normal((4, 1, 16, 4))
    w = semsa_weights(Tensor(q), Tensor(k), mask=layout.mask).data
    assert np.all(w[:, 0][layout.mask < 0] < 1e-6)


def test_all_zero_weights_make_block_pair_identity():
    rng = np.random.default_rng(15)
    blocks = [SESTBlock(rng, 8, 2, 2, shifted=False), SESTBlock(rng, 8, 2, 2, shifted=True)]
    for blk in blocks:
        for _, p in blk.named_parameters():
            p.data[...] = 0.0
    y = rng.standard_normal((16, 8))
    np.testing.assert_array_equal(sest_block_pair(Tensor(y), blocks).data, Tensor(y).data)
