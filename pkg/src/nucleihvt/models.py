"""NucleiHVT and CB-NucleiHVT networks.

Parameter names are hierarchical: the NucleiHVT encoder lives under ``enc``,
the CB-NucleiHVT encoders under ``enc_a`` (NucleiHVT-style) and ``enc_b``
(MaxViT-style), the fusion blocks under ``fuse.l{level}`` and every decoder
under ``dec``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .blocks import (
    AttentionConfig,
    MBConvSpec,
    attention_sublayer,
    bn,
    conv,
    init_attention_sublayer,
    init_maxvit,
    maxvit_block,
)
from .params import Context, Initializer, ParamStore
from .tensor import Tensor, concat, count_flops, no_grad

VARIANTS = ("nucleihvt", "cb_nucleihvt")
DECODERS = ("nucleihvt", "maxvit_unet", "upernet")
NUM_STAGES = 5
MIN_INPUT = 32
PPM_BINS = (1, 2, 4)


@dataclass(frozen=True)
class StageSpec:
    index: int
    channels: int
    dilation: int = 1
    has_maxvit: bool = True
    depth: int = 1

    @property
    def downsample(self) -> bool:
        return self.index > 0


def default_stages(base: int, s0_maxvit: bool = True) -> tuple[StageSpec, ...]:
    return tuple(
        StageSpec(i, base * 2**i, dilation=2 if i in (2, 4) else 1, has_maxvit=s0_maxvit or i > 0)
        for i in range(NUM_STAGES)
    )


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "nucleihvt"
    in_channels: int = 3
    num_classes: int = 2
    base_channels: int = 8
    stages: tuple[StageSpec, ...] = field(default=())
    window: int = 8
    use_rel_bias: bool = True
    expansion: float = 4.0
    se_ratio: float = 0.25
    decoder: str = "nucleihvt"
    seed: int = 0

    def __post_init__(self):
        if not self.stages:
            object.__setattr__(self, "stages", default_stages(self.base_channels))
        else:
            object.__setattr__(self, "stages", tuple(
                s if isinstance(s, StageSpec) else StageSpec(**s) for s in self.stages
            ))
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.decoder not in DECODERS:
            raise ValueError(f"unknown decoder {self.decoder!r}; expected one of {DECODERS}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stage specs, got {len(self.stages)}")
        for i, s in enumerate(self.stages):
            if s.index != i:
                raise ValueError(f"stage {i} carries index {s.index}")
            if s.dilation not in (1, 2) or (s.dilation == 2 and i not in (2, 4)):
                raise ValueError(f"dilation {s.dilation} not permitted at stage {i}")
            if i and s.channels < self.stages[i - 1].channels:
                raise ValueError(f"stage {i} width {s.channels} is below stage {i - 1}")
            if s.depth < 1:
                raise ValueError(f"stage {i} depth must be >= 1")

    @property
    def widths(self) -> list[int]:
        return [s.channels for s in self.stages]

    def attention(self, dim: int) -> AttentionConfig:
        return AttentionConfig.for_dim(dim, self.window, self.use_rel_bias)

    def mbconv(self, cin: int, cout: int, stride: int = 1) -> MBConvSpec:
        return MBConvSpec(cin, cout, stride, self.expansion, self.se_ratio)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stages"] = [dataclasses.asdict(s) for s in self.stages]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        if "stages" in d:
            d["stages"] = tuple(StageSpec(**s) for s in d["stages"])
        return cls(**d)


# ---------------------------------------------------------------------------
# shared pieces


def _init_conv_bn(init: Initializer, prefix: str, cout: int, cin: int, k: int) -> None:
    init.conv(f"{prefix}.conv", cout, cin, k, bias=False)
    init.batchnorm(f"{prefix}.bn", cout)


def _conv_bn_mish(ctx: Context, prefix: str, x: Tensor, k: int = 1, dilation: int = 1) -> Tensor:
    pad = dilation * (k - 1) // 2
    return F.mish(bn(ctx, f"{prefix}.bn", conv(ctx, f"{prefix}.conv", x, padding=pad, dilation=dilation)))


def _init_conv_stack(init: Initializer, prefix: str, cin: int, cout: int) -> None:
    _init_conv_bn(init, f"{prefix}.c1", cout, cin, 1)
    _init_conv_bn(init, f"{prefix}.c3", cout, cout, 3)
    if cin != cout:
        init.conv(f"{prefix}.shortcut", cout, cin, 1, bias=False)


def _conv_stack(ctx: Context, prefix: str, x: Tensor, dilation: int) -> Tensor:
    """1x1 -> BN -> Mish -> 3x3 (dilated) -> BN -> Mish, residual across the pair."""
    h = _conv_bn_mish(ctx, f"{prefix}.c1", x, 1)
    h = _conv_bn_mish(ctx, f"{prefix}.c3", h, 3, dilation)
    short = f"{prefix}.shortcut"
    skip = conv(ctx, short, x) if f"{short}.weight" in ctx.params else x
    return h + skip


def _init_maxvit_stack(init: Initializer, prefix: str, cfg: ModelConfig, cin: int, cout: int, depth: int, stride: int = 1):
    for d in range(depth):
        spec = cfg.mbconv(cin if d == 0 else cout, cout, stride if d == 0 else 1)
        init_maxvit(init, f"{prefix}.{d}", spec, cfg.attention(cout))


def _maxvit_stack(ctx: Context, prefix: str, x: Tensor, cfg: ModelConfig, cout: int, depth: int, stride: int = 1):
    for d in range(depth):
        spec = cfg.mbconv(x.shape[1], cout, stride if d == 0 else 1)
        x = maxvit_block(ctx, f"{prefix}.{d}", x, spec, cfg.attention(cout))
    return x


def _check_input(image: Tensor, cfg: ModelConfig) -> None:
    if image.ndim != 4 or image.shape[1] != cfg.in_channels:
        raise ValueError(f"expected input (N, {cfg.in_channels}, H, W), got {image.shape}")
    h, w = image.shape[2:]
    if h < MIN_INPUT or w < MIN_INPUT:
        raise ValueError(f"input {h}x{w} is too small; minimum is {MIN_INPUT}x{MIN_INPUT}")
    if h % 16 or w % 16:
        raise ValueError(f"input {h}x{w} must be divisible by 16 (four 2x reductions)")


# ---------------------------------------------------------------------------
# NucleiHVT encoder


def _init_encoder(init: Initializer, prefix: str, cfg: ModelConfig) -> None:
    widths = cfg.widths
    s0 = cfg.stages[0]
    _init_conv_bn(init, f"{prefix}.s0.conv1", widths[0], cfg.in_channels, 3)
    _init_conv_bn(init, f"{prefix}.s0.conv2", widths[0], widths[0], 3)
    if s0.has_maxvit:
        _init_maxvit_stack(init, f"{prefix}.s0.maxvit", cfg, widths[0], widths[0], s0.depth)
    for s in cfg.stages[1:]:
        p = f"{prefix}.s{s.index}"
        _init_conv_stack(init, f"{p}.convs", widths[s.index - 1], s.channels)
        if s.has_maxvit:
            _init_maxvit_stack(init, f"{p}.maxvit", cfg, s.channels, s.channels, s.depth)


def _encoder(ctx: Context, prefix: str, cfg: ModelConfig, image: Tensor):
    s0 = cfg.stages[0]
    x = _conv_bn_mish(ctx, f"{prefix}.s0.conv1", image, 3)
    x = _conv_bn_mish(ctx, f"{prefix}.s0.conv2", x, 3)
    if s0.has_maxvit:
        x = _maxvit_stack(ctx, f"{prefix}.s0.maxvit", x, cfg, s0.channels, s0.depth)
    feats = [x]
    for s in cfg.stages[1:]:
        p = f"{prefix}.s{s.index}"
        x = _conv_stack(ctx, f"{p}.convs", x, s.dilation)
        x = F.maxpool2d(x, 2, 2)
        if s.has_maxvit:
            x = _maxvit_stack(ctx, f"{p}.maxvit", x, cfg, s.channels, s.depth)
        feats.append(x)
    return feats[:-1], feats[-1]


def encoder_forward(image: Tensor, params: ParamStore, cfg: ModelConfig, *, training: bool = True, prefix: str = "enc"):
    """Returns ``(skips, bottleneck)``; skips hold the S0..S3 features."""
    _check_input(image, cfg)
    return _encoder(Context(params, training), prefix, cfg, image)


# ---------------------------------------------------------------------------
# MaxViT-style encoder (second CB-NucleiHVT backbone)


def _init_maxvit_encoder(init: Initializer, prefix: str, cfg: ModelConfig) -> None:
    widths = cfg.widths
    init.conv(f"{prefix}.stem.conv1", widths[0], cfg.in_channels, 3, bias=False)
    init.batchnorm(f"{prefix}.stem.bn1", widths[0])
    init.conv(f"{prefix}.stem.conv2", widths[0], widths[0], 3, bias=False)
    init.batchnorm(f"{prefix}.stem.bn2", widths[0])
    for s in cfg.stages[1:]:
        _init_maxvit_stack(init, f"{prefix}.s{s.index}", cfg, widths[s.index - 1], s.channels, s.depth, stride=2)


def _maxvit_encoder(ctx: Context, prefix: str, cfg: ModelConfig, image: Tensor):
    x = F.gelu(bn(ctx, f"{prefix}.stem.bn1", conv(ctx, f"{prefix}.stem.conv1", image, padding=1)))
    x = F.gelu(bn(ctx, f"{prefix}.stem.bn2", conv(ctx, f"{prefix}.stem.conv2", x, padding=1)))
    feats = [x]
    for s in cfg.stages[1:]:
        x = _maxvit_stack(ctx, f"{prefix}.s{s.index}", x, cfg, s.channels, s.depth, stride=2)
        feats.append(x)
    return feats[:-1], feats[-1]


# ---------------------------------------------------------------------------
# decoders


def _init_decoder(init: Initializer, prefix: str, cfg: ModelConfig) -> None:
    widths = cfg.widths
    if cfg.decoder == "upernet":
        _init_upernet(init, prefix, cfg)
        return
    for i in range(NUM_STAGES - 2, -1, -1):
        p = f"{prefix}.d{i}"
        c = widths[i]
        init.conv(f"{p}.up", c, widths[i + 1], 2, transpose=True)
        if cfg.decoder == "nucleihvt":
            _init_conv_stack(init, f"{p}.convs", 2 * c, c)
            _init_maxvit_stack(init, f"{p}.maxvit", cfg, c, c, cfg.stages[i].depth)
        else:
            _init_maxvit_stack(init, f"{p}.maxvit", cfg, 2 * c, c, cfg.stages[i].depth)
    init.conv(f"{prefix}.head", cfg.num_classes, widths[0], 1)


def _decoder(ctx: Context, prefix: str, cfg: ModelConfig, bottleneck: Tensor, skips: list[Tensor], trace=None) -> Tensor:
    """``trace``, when a list, receives the D3..D0 stage outputs."""
    if len(skips) != NUM_STAGES - 1:
        raise ValueError(f"decoder needs {NUM_STAGES - 1} skips, got {len(skips)}")
    if cfg.decoder == "upernet":
        return _upernet(ctx, prefix, cfg, bottleneck, skips, trace)
    x = bottleneck
    for i in range(NUM_STAGES - 2, -1, -1):
        p = f"{prefix}.d{i}"
        up = ctx[f"{p}.up.weight"]
        x = F.conv_transpose2d(x, up, ctx[f"{p}.up.bias"], stride=2)
        skip = skips[i]
        if x.shape[2:] != skip.shape[2:] or x.shape[1] != skip.shape[1]:
            raise ValueError(
                f"decoder stage D{i}: upsampled features {x.shape[1:]} do not match skip S{i} {skip.shape[1:]}"
            )
        x = concat([x, skip], axis=1)
        c = skip.shape[1]
        if cfg.decoder == "nucleihvt":
            x = _conv_stack(ctx, f"{p}.convs", x, 1)
            x = F.maxpool2d(x, 3, 1, 1)
        x = _maxvit_stack(ctx, f"{p}.maxvit", x, cfg, c, cfg.stages[i].depth)
        if trace is not None:
            trace.append(x)
    return conv(ctx, f"{prefix}.head", x)


def decoder_forward(bottleneck: Tensor, skips, params: ParamStore, cfg: ModelConfig, *, training: bool = True, prefix: str = "dec"):
    return _decoder(Context(params, training), prefix, cfg, bottleneck, list(skips))


def _pool_matrix(n: int, bins: int, dtype) -> np.ndarray:
    m = np.zeros((bins, n), dtype=dtype)
    for r in range(bins):
        lo, hi = (r * n) // bins, -((-(r + 1) * n) // bins)
        m[r, lo:hi] = 1.0 / (hi - lo)
    return m


def _interp_matrix(n_out: int, n_in: int, dtype) -> np.ndarray:
    """Bilinear (half-pixel centers) resampling matrix of shape (n_out, n_in)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        m[o, lo] += 1 - frac
        m[o, hi] += frac
    return m


def _resample(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    return Tensor(rows) @ x @ Tensor(cols.T.copy())


def resize(x: Tensor, size: tuple[int, int]) -> Tensor:
    h, w = x.shape[2:]
    if (h, w) == tuple(size):
        return x
    return _resample(x, _interp_matrix(size[0], h, x.dtype), _interp_matrix(size[1], w, x.dtype))


def _init_upernet(init: Initializer, prefix: str, cfg: ModelConfig) -> None:
    widths = cfg.widths
    d = widths[0]
    for b in PPM_BINS:
        _init_conv_bn(init, f"{prefix}.ppm.b{b}", d, widths[-1], 1)
    _init_conv_bn(init, f"{prefix}.ppm.fuse", d, widths[-1] + d * len(PPM_BINS), 3)
    for i in range(NUM_STAGES - 1):
        _init_conv_bn(init, f"{prefix}.lateral{i}", d, widths[i], 1)
        _init_conv_bn(init, f"{prefix}.fpn{i}", d, d, 3)
    _init_conv_bn(init, f"{prefix}.fuse", d, d * NUM_STAGES, 3)
    init.conv(f"{prefix}.head", cfg.num_classes, d, 1)


def _upernet(ctx: Context, prefix: str, cfg: ModelConfig, bottleneck: Tensor, skips: list[Tensor], trace=None) -> Tensor:
    """Pyramid pooling on the bottleneck plus an FPN over the skips."""
    h, w = bottleneck.shape[2:]
    pyramid = [bottleneck]
    for b in PPM_BINS:
        pooled = _resample(bottleneck, _pool_matrix(h, b, bottleneck.dtype), _pool_matrix(w, b, bottleneck.dtype))
        pyramid.append(resize(_conv_bn_mish(ctx, f"{prefix}.ppm.b{b}", pooled), (h, w)))
    top = _conv_bn_mish(ctx, f"{prefix}.ppm.fuse", concat(pyramid, axis=1), 3)
    levels = [top]
    for i in range(NUM_STAGES - 2, -1, -1):
        lat = _conv_bn_mish(ctx, f"{prefix}.lateral{i}", skips[i])
        top = lat + resize(top, lat.shape[2:])
        levels.insert(0, _conv_bn_mish(ctx, f"{prefix}.fpn{i}", top, 3))
    if trace is not None:
        trace.extend(reversed(levels[:-1]))
    size = levels[0].shape[2:]
    fused = _conv_bn_mish(ctx, f"{prefix}.fuse", concat([resize(f, size) for f in levels], axis=1), 3)
    return conv(ctx, f"{prefix}.head", fused)


# ---------------------------------------------------------------------------
# CB-Fusion


def _init_cb_fusion(init: Initializer, prefix: str, cfg: ModelConfig, channels: int) -> None:
    _init_conv_bn(init, f"{prefix}.reduce", channels, 2 * channels, 1)
    att = cfg.attention(channels)
    init_attention_sublayer(init, f"{prefix}.block", att)
    init_attention_sublayer(init, f"{prefix}.grid", att)


def _cb_fusion(ctx: Context, prefix: str, cfg: ModelConfig, f_a: Tensor, f_b: Tensor) -> Tensor:
    if f_a.shape != f_b.shape:
        raise ValueError(f"{prefix}: fused features differ in shape, {f_a.shape} vs {f_b.shape}")
    r = _conv_bn_mish(ctx, f"{prefix}.reduce", concat([f_a, f_b], axis=1))
    att = cfg.attention(r.shape[1])
    y = attention_sublayer(ctx, f"{prefix}.block", r, att, "block")
    y = attention_sublayer(ctx, f"{prefix}.grid", y, att, "grid")
    return y + r


def cb_fusion(f_a: Tensor, f_b: Tensor, params: ParamStore, cfg: ModelConfig, *, level: int = 0, training: bool = True, prefix: str = "fuse"):
    """Fuse two same-shape feature maps into one of the same shape."""
    return _cb_fusion(Context(params, training), f"{prefix}.l{level}", cfg, f_a, f_b)


# ---------------------------------------------------------------------------
# full networks


def init_params(cfg: ModelConfig, seed: int | None = None, dtype=np.float32) -> ParamStore:
    store = ParamStore()
    init = Initializer(store, np.random.default_rng(cfg.seed if seed is None else seed), dtype)
    if cfg.variant == "nucleihvt":
        _init_encoder(init, "enc", cfg)
    else:
        _init_encoder(init, "enc_a", cfg)
        _init_maxvit_encoder(init, "enc_b", cfg)
        for level, c in enumerate(cfg.widths):
            _init_cb_fusion(init, f"fuse.l{level}", cfg, c)
    _init_decoder(init, "dec", cfg)
    return store


def nucleihvt_forward(image: Tensor, params: ParamStore, cfg: ModelConfig, *, training: bool = True, trace=None) -> Tensor:
    _check_input(image, cfg)
    ctx = Context(params, training)
    skips, bottleneck = _encoder(ctx, "enc", cfg, image)
    if trace is not None:
        trace.update(skips=skips, bottleneck=bottleneck, decoder=[])
    return _decoder(ctx, "dec", cfg, bottleneck, skips, None if trace is None else trace["decoder"])


def cb_nucleihvt_forward(image: Tensor, params: ParamStore, cfg: ModelConfig, *, training: bool = True, trace=None) -> Tensor:
    _check_input(image, cfg)
    ctx = Context(params, training)
    skips_a, bott_a = _encoder(ctx, "enc_a", cfg, image)
    skips_b, bott_b = _maxvit_encoder(ctx, "enc_b", cfg, image)
    fused = []
    for level, (fa, fb) in enumerate(zip(skips_a + [bott_a], skips_b + [bott_b])):
        if fa.shape != fb.shape:
            raise ValueError(f"encoder width mismatch at level {level}: {fa.shape[1:]} vs {fb.shape[1:]}")
        fused.append(_cb_fusion(ctx, f"fuse.l{level}", cfg, fa, fb))
    if trace is not None:
        trace.update(skips=fused[:-1], bottleneck=fused[-1], decoder=[])
    return _decoder(ctx, "dec", cfg, fused[-1], fused[:-1], None if trace is None else trace["decoder"])


def forward(image: Tensor, params: ParamStore, cfg: ModelConfig, *, training: bool = True, trace=None) -> Tensor:
    """Logits of shape (N, num_classes, H, W) for either variant.

    ``trace``, when a dict, is filled with the ``skips`` fed to the decoder,
    the ``bottleneck`` and the ``decoder`` stage outputs (D3..D0).
    """
    if cfg.variant == "nucleihvt":
        return nucleihvt_forward(image, params, cfg, training=training, trace=trace)
    return cb_nucleihvt_forward(image, params, cfg, training=training, trace=trace)


def param_count(cfg: ModelConfig) -> int:
    return init_params(cfg).num_parameters()


def flop_estimate(cfg: ModelConfig, input_shape: tuple[int, int, int, int]) -> int:
    """Conv/matmul operations (2 per multiply-add) of one inference forward."""
    params = init_params(cfg)
    image = Tensor(np.zeros(input_shape, dtype=np.float32))
    with no_grad(), count_flops() as total:
        forward(image, params, cfg, training=False)
    return total[0]
