import numpy as np
import pytest

from nucleihvt.blocks import (
    AttentionConfig,
    MBConvSpec,
    block_partition,
    block_unpartition,
    grid_partition,
    grid_unpartition,
    init_attention,
    init_maxvit,
    init_mbconv,
    maxvit_block,
    mbconv,
    relative_position_index,
    window_attention,
)
from nucleihvt.params import Context, Initializer, ParamStore
from nucleihvt.tensor import Tensor, no_grad


def _store(rng, build):
    store = ParamStore()
    build(Initializer(store, rng, np.float64))
    return store


@pytest.mark.parametrize("partition,unpartition", [(block_partition, block_unpartition), (grid_partition, grid_unpartition)])
def test_partitions_round_trip_bitwise(rng, partition, unpartition):
    x = rng.normal(size=(2, 3, 16, 24)).astype(np.float32)
    tokens = partition(Tensor(x), 8)
    assert tokens.shape == (2 * 2 * 3, 64, 3)
    assert np.array_equal(unpartition(tokens, x.shape, 8).data, x)


def test_block_window_holds_a_contiguous_patch():
    x = np.arange(16 * 16, dtype=np.float64).reshape(1, 1, 16, 16)
    first = block_partition(Tensor(x), 8).data[0, :, 0]
    np.testing.assert_array_equal(first.reshape(8, 8), x[0, 0, :8, :8])


def test_grid_window_samples_with_map_stride():
    x = np.arange(16 * 16, dtype=np.float64).reshape(1, 1, 16, 16)
    first = grid_partition(Tensor(x), 8).data[0, :, 0]
    np.testing.assert_array_equal(first.reshape(8, 8), x[0, 0, ::2, ::2])


def test_partition_rejects_indivisible_map():
    with pytest.raises(ValueError):
        block_partition(Tensor(np.zeros((1, 1, 12, 16))), 8)


def test_relative_position_index_is_symmetric_about_center():
    idx = relative_position_index(3)
    assert idx.shape == (9, 9)
    assert np.all(np.diag(idx) == (2 * 3 - 1) ** 2 // 2)
    assert idx.min() == 0 and idx.max() == (2 * 3 - 1) ** 2 - 1


def _attention(rng, rel_bias, dim=8, heads=2, window=4):
    cfg = AttentionConfig(dim, heads, window, rel_bias)
    store = _store(rng, lambda init: init_attention(init, "a", cfg))
    for _, t in store.trainable():
        t.data[...] = rng.normal(0, 0.3, size=t.shape)
    return cfg, Context(store, False)


@pytest.mark.parametrize("rel_bias", [True, False])
def test_attention_rows_sum_to_one(rng, rel_bias):
    cfg, ctx = _attention(rng, rel_bias)
    tokens = Tensor(rng.normal(size=(3, 16, 8)))
    with no_grad():
        _, weights = window_attention(ctx, "a", tokens, cfg, return_weights=True)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-6)


def test_attention_is_permutation_equivariant_without_rel_bias(rng):
    cfg, ctx = _attention(rng, rel_bias=False)
    tokens = rng.normal(size=(2, 16, 8))
    perm = rng.permutation(16)
    with no_grad():
        out = window_attention(ctx, "a", Tensor(tokens), cfg).data
        out_p = window_attention(ctx, "a", Tensor(tokens[:, perm]), cfg).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-12)


def test_rel_bias_breaks_permutation_equivariance(rng):
    cfg, ctx = _attention(rng, rel_bias=True)
    tokens = rng.normal(size=(1, 16, 8))
    perm = rng.permutation(16)
    with no_grad():
        out = window_attention(ctx, "a", Tensor(tokens), cfg).data
        out_p = window_attention(ctx, "a", Tensor(tokens[:, perm]), cfg).data
    assert not np.allclose(out_p, out[:, perm], atol=1e-6)


def test_attention_rejects_wrong_dim(rng):
    cfg, ctx = _attention(rng, rel_bias=False)
    with pytest.raises(ValueError):
        window_attention(ctx, "a", Tensor(np.zeros((1, 16, 4))), cfg)


def test_attention_config_requires_divisible_heads():
    with pytest.raises(ValueError):
        AttentionConfig(10, heads=3)


def test_mbconv_with_zeroed_projection_is_identity(rng):
    spec = MBConvSpec(4, 4)
    store = _store(rng, lambda init: init_mbconv(init, "mb", spec))
    store["mb.project.weight"].data[...] = 0.0
    x = rng.normal(size=(2, 4, 8, 8))
    with no_grad():
        y = mbconv(Context(store, True), "mb", Tensor(x), spec).data
    np.testing.assert_array_equal(y, x)


def test_strided_mbconv_shortcut_is_pooled_projection(rng):
    spec = MBConvSpec(4, 6, stride=2)
    store = _store(rng, lambda init: init_mbconv(init, "mb", spec))
    store["mb.project.weight"].data[...] = 0.0
    store["mb.project.bias"].data[...] = 0.0
    x = rng.normal(size=(1, 4, 8, 8))
    with no_grad():
        y = mbconv(Context(store, True), "mb", Tensor(x), spec).data
    pooled = x.reshape(1, 4, 4, 2, 4, 2).mean(axis=(3, 5))
    w = store["mb.shortcut.weight"].data[:, :, 0, 0]
    ref = np.einsum("oc,nchw->nohw", w, pooled) + store["mb.shortcut.bias"].data[None, :, None, None]
    assert y.shape == (1, 6, 4, 4)
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_mbconv_spec_rejects_bad_stride():
    with pytest.raises(ValueError):
        MBConvSpec(4, 4, stride=3)


def test_maxvit_block_preserves_shape_and_handles_padding(rng):
    spec, cfg = MBConvSpec(8, 8), AttentionConfig(8, 2, 4)
    store = _store(rng, lambda init: init_maxvit(init, "mv", spec, cfg))
    with no_grad():
        y = maxvit_block(Context(store, False), "mv", Tensor(rng.normal(size=(1, 8, 6, 10))), spec, cfg)
    assert y.shape == (1, 8, 6, 10)
    assert np.all(np.isfinite(y.data))


def test_grid_windows_gather_positions_spaced_by_map_stride():
    h = w = 16
    coords = np.stack(np.meshgrid(np.arange(h), np.arange(w), indexing="ij")).astype(np.float64)[None]
    windows = grid_partition(Tensor(coords), 8).data  # (4, 64, 2)
    assert windows.shape == (4, 64, 2)
    for win in windows:
        assert np.all((win - win[0]) % 2 == 0)
    # together the windows cover every pixel exactly once
    flat = {tuple(p) for p in windows.reshape(-1, 2).astype(int).tolist()}
    assert len(flat) == h * w


def test_degenerate_window_covers_whole_map_in_row_major_order(rng):
    x = rng.normal(size=(1, 3, 8, 8))
    blocks, grids = block_partition(Tensor(x), 8).data, grid_partition(Tensor(x), 8).data
    assert np.array_equal(blocks, grids)
    np.testing.assert_array_equal(blocks[0], x[0].reshape(3, 64).T)


def test_block_and_grid_hold_the_same_values(rng):
    x = rng.normal(size=(1, 2, 16, 16))
    a = np.sort(block_partition(Tensor(x), 8).data.ravel())
    b = np.sort(grid_partition(Tensor(x), 8).data.ravel())
    assert np.array_equal(a, b)


def _identity_attention(dim):
    cfg = AttentionConfig(dim, 1, 1, use_rel_bias=False)
    store = ParamStore()
    init_attention(Initializer(store, np.random.default_rng(0), np.float64), "a", cfg)
    return cfg, store


def test_two_token_attention_matches_hand_computation():
    cfg, store = _identity_attention(1)
    # head_dim 1: q = 2x, k = x, v = 3x, output projection identity
    store["a.qkv.weight"].data[...] = [[2.0, 1.0, 3.0]]
    store["a.proj.weight"].data[...] = [[1.0]]
    x = np.array([[[1.0], [-0.5]]])
    out = window_attention(Context(store, False), "a", Tensor(x), cfg).data
    q, k, v = 2 * x[0, :, 0], x[0, :, 0], 3 * x[0, :, 0]
    for i in range(2):
        s = np.exp(q[i] * k)
        expected = (s / s.sum()) @ v
        assert out[0, i, 0] == pytest.approx(expected, rel=1e-12)


def test_attention_over_identical_tokens_gives_identical_outputs(rng):
    cfg, store = _identity_attention(4)
    store["a.qkv.weight"].data[...] = rng.normal(size=(4, 12))
    store["a.proj.weight"].data[...] = np.eye(4)
    x = np.tile(rng.normal(size=(1, 1, 4)), (1, 5, 1))
    out = window_attention(Context(store, False), "a", Tensor(x), cfg).data
    np.testing.assert_allclose(out, np.broadcast_to(out[:, :1], out.shape), atol=1e-12)


def test_maxvit_block_with_zeroed_branches_reduces_to_mbconv(rng):
    spec, cfg = MBConvSpec(8, 8), AttentionConfig(8, 2, 4)
    store = _store(rng, lambda init: init_maxvit(init, "mv", spec, cfg))
    for part in ("block", "grid"):
        for name in ("attn.proj", "ffn.fc2"):
            store[f"mv.{part}.{name}.weight"].data[...] = 0.0
            store[f"mv.{part}.{name}.bias"].data[...] = 0.0
    x = Tensor(rng.normal(size=(1, 8, 8, 8)))
    with no_grad():
        full = maxvit_block(Context(store, False), "mv", x, spec, cfg).data
        conv_only = mbconv(Context(store, False), "mv.mbconv", x, spec).data
    np.testing.assert_array_equal(full, conv_only)


def test_maxvit_block_is_finite_for_large_inputs(rng):
    spec, cfg = MBConvSpec(8, 8), AttentionConfig(8, 2, 4)
    store = _store(rng, lambda init: init_maxvit(init, "mv", spec, cfg))
    x = Tensor(rng.uniform(-1e3, 1e3, size=(2, 8, 8, 8)))
    with no_grad():
        assert np.all(np.isfinite(maxvit_block(Context(store, True), "mv", x, spec, cfg).data))
