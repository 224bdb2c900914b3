import numpy as np
import pytest

from nucleihvt.checkpoint import Checkpoint, load_mapped, save_checkpoint
from nucleihvt.losses import combined_loss
from nucleihvt.models import DECODERS, VARIANTS, ModelConfig, StageSpec, cb_fusion, flop_estimate, forward, init_params, param_count
from nucleihvt.tensor import Tensor, no_grad, reset_tape


def _run(cfg, size, n=1, training=False):
    params = init_params(cfg)
    trace = {}
    with no_grad():
        y = forward(Tensor(np.zeros((n, 3, size, size), np.float32)), params, cfg, training=training, trace=trace)
    return y, trace


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("decoder", DECODERS)
def test_resolution_mirror_at_64(variant, decoder):
    cfg = ModelConfig(variant=variant, decoder=decoder, base_channels=2, num_classes=3)
    y, trace = _run(cfg, 64, n=2)
    assert y.shape == (2, 3, 64, 64)
    skips = trace["skips"]
    for i, s in enumerate(skips):
        assert s.shape[2:] == (64 >> i, 64 >> i)
        assert s.shape[1] == cfg.widths[i]
    assert trace["bottleneck"].shape[2:] == (4, 4)
    # decoder stages D3..D0 land on the skip resolutions in reverse
    for d, s in zip(trace["decoder"], reversed(skips)):
        assert d.shape[2:] == s.shape[2:]


def test_input_must_be_divisible_by_16():
    cfg = ModelConfig(base_channels=2)
    with pytest.raises(ValueError):
        forward(Tensor(np.zeros((1, 3, 40, 40), np.float32)), init_params(cfg), cfg)


def test_input_channel_count_is_checked():
    cfg = ModelConfig(base_channels=2)
    with pytest.raises(ValueError):
        forward(Tensor(np.zeros((1, 4, 32, 32), np.float32)), init_params(cfg), cfg)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(variant="unet")
    with pytest.raises(ValueError):
        ModelConfig(decoder="fpn")
    with pytest.raises(ValueError):
        ModelConfig(num_classes=1)
    stages = list(ModelConfig(base_channels=2).stages)
    stages[1] = StageSpec(1, 4, dilation=2)
    with pytest.raises(ValueError):
        ModelConfig(base_channels=2, stages=tuple(stages))


def test_config_dict_round_trip():
    cfg = ModelConfig(variant="cb_nucleihvt", decoder="upernet", base_channels=4, num_classes=5)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_init_is_reproducible_from_seed():
    cfg = ModelConfig(base_channels=2, seed=7)
    a, b = init_params(cfg), init_params(cfg)
    assert all(np.array_equal(a[n].data, b[n].data) for n in a.names())
    c = init_params(cfg, seed=8)
    assert any(not np.array_equal(a[n].data, c[n].data) for n, _ in a.trainable())


def test_cb_fusion_reduce_weight_permutation_oracle(rng):
    # Swapping the two inputs while swapping the halves of the reduce
    # weights along input channels must leave the fused output unchanged.
    cfg = ModelConfig(variant="cb_nucleihvt", base_channels=4)
    params = init_params(cfg, dtype=np.float64)
    a, b = rng.normal(size=(2, 4, 8, 8)), rng.normal(size=(2, 4, 8, 8))
    with no_grad():
        ref = cb_fusion(Tensor(a), Tensor(b), params, cfg, level=0, training=False).data
        w = params["fuse.l0.reduce.conv.weight"].data
        w[...] = np.concatenate([w[:, 4:], w[:, :4]], axis=1)
        swapped = cb_fusion(Tensor(b), Tensor(a), params, cfg, level=0, training=False).data
    np.testing.assert_allclose(swapped, ref, atol=1e-12)


def test_cb_fusion_rejects_mismatched_inputs():
    cfg = ModelConfig(variant="cb_nucleihvt", base_channels=4)
    params = init_params(cfg)
    with pytest.raises(ValueError):
        cb_fusion(Tensor(np.zeros((1, 4, 8, 8))), Tensor(np.zeros((1, 4, 4, 4))), params, cfg)


def test_encoder_weights_map_into_cb_first_encoder(tmp_path):
    src_cfg = ModelConfig(variant="nucleihvt", base_channels=2, seed=3)
    dst_cfg = ModelConfig(variant="cb_nucleihvt", base_channels=2, seed=4)
    src = init_params(src_cfg)
    path = tmp_path / "enc.nhvt"
    save_checkpoint(path, Checkpoint(src_cfg, src))
    dst = init_params(dst_cfg)
    loaded = load_mapped(dst, path, {"enc.": "enc_a."})
    enc_names = [n for n in src.names() if n.startswith("enc.")]
    assert sorted(loaded) == sorted("enc_a." + n[4:] for n in enc_names)
    for n in enc_names:
        assert np.array_equal(dst["enc_a." + n[4:]].data, src[n].data)


def test_decoder_swap_keeps_encoder_parameters():
    base = ModelConfig(base_channels=2)
    ref = init_params(base)
    for dec in DECODERS[1:]:
        other = init_params(base.replace(decoder=dec))
        enc = [n for n in ref.names() if n.startswith("enc.")]
        assert enc == [n for n in other.names() if n.startswith("enc.")]
        assert all(np.array_equal(ref[n].data, other[n].data) for n in enc)


@pytest.mark.parametrize("c", [2, 8])
@pytest.mark.parametrize("decoder", DECODERS)
def test_cb_has_more_parameters(c, decoder):
    nh = param_count(ModelConfig(variant="nucleihvt", decoder=decoder, base_channels=c))
    cb = param_count(ModelConfig(variant="cb_nucleihvt", decoder=decoder, base_channels=c))
    assert cb > nh


def test_flops_grow_with_input_area():
    cfg = ModelConfig(base_channels=2)
    # small maps are padded up to the attention window, so compare sizes
    # where every stage already covers whole windows
    small, large = flop_estimate(cfg, (1, 3, 128, 128)), flop_estimate(cfg, (1, 3, 256, 256))
    assert small > 0
    assert large / small == pytest.approx(4.0, rel=1e-3)


@pytest.mark.parametrize("variant", VARIANTS)
def test_nearly_every_parameter_receives_gradient(rng, variant):
    cfg = ModelConfig(variant=variant, base_channels=2)
    params = init_params(cfg, dtype=np.float64)
    reset_tape()
    params.zero_grad()
    x = Tensor(rng.normal(size=(2, 3, 32, 32)))
    target = rng.integers(0, 2, size=(2, 32, 32))
    combined_loss(forward(x, params, cfg), target).backward()
    trainable = params.trainable()
    dead = [n for n, t in trainable if t.grad is None or not np.any(t.grad)]
    assert len(dead) <= 0.01 * len(trainable), dead


def test_every_parameter_gets_a_populated_gradient(rng):
    cfg = ModelConfig(variant="cb_nucleihvt", decoder="upernet", base_channels=2)
    params = init_params(cfg)
    reset_tape()
    params.zero_grad()
    x = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
    combined_loss(forward(x, params, cfg), rng.integers(0, 2, size=(2, 32, 32))).backward()
    assert all(t.grad is not None for _, t in params.trainable())


def test_zero_head_gives_uniform_probabilities(rng):
    cfg = ModelConfig(base_channels=2)
    params = init_params(cfg)
    params["dec.head.weight"].data[...] = 0.0
    params["dec.head.bias"].data[...] = 0.0
    with no_grad():
        y = forward(Tensor(rng.normal(size=(1, 3, 32, 32)).astype(np.float32)), params, cfg, training=False).data
    assert np.all(y == 0.0)


def test_single_pointwise_conv_parameter_count():
    from nucleihvt.params import Initializer, ParamStore

    store = ParamStore()
    Initializer(store, np.random.default_rng(0)).conv("c", 8, 3, 1)
    assert store.num_parameters() == 32


def test_cb_with_second_encoder_muted_is_finite(rng):
    cfg = ModelConfig(variant="cb_nucleihvt", base_channels=2)
    params = init_params(cfg)
    for level, c in enumerate(cfg.widths):
        params[f"fuse.l{level}.reduce.conv.weight"].data[:, c:] = 0.0
    with no_grad():
        y = forward(Tensor(rng.normal(size=(1, 3, 32, 32)).astype(np.float32)), params, cfg, training=False)
    assert np.all(np.isfinite(y.data))


def test_forward_is_bitwise_repeatable(rng):
    cfg = ModelConfig(variant="cb_nucleihvt", base_channels=2)
    params = init_params(cfg)
    x = rng.normal(size=(1, 3, 32, 32)).astype(np.float32)
    with no_grad():
        a = forward(Tensor(x), params, cfg, training=False).data
        b = forward(Tensor(x), params, cfg, training=False).data
    assert np.array_equal(a, b)
