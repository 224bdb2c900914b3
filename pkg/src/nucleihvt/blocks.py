"""MBConv, multi-axis windowed attention and the composite MaxViT block.

Layers are pairs of functions: ``init_*`` registers parameters under a name
prefix, and the forward function reads them back from a :class:`Context`.
Feature maps are NCHW; attention runs on token tensors of shape
``(windows, P*P, C)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import functional as F
from .params import Context, Initializer
from .tensor import Tensor

WINDOW = 8


def default_heads(dim: int) -> int:
    return max(1, dim // 32)


@dataclass(frozen=True)
class AttentionConfig:
    dim: int
    heads: int = 1
    window: int = WINDOW
    use_rel_bias: bool = True

    def __post_init__(self):
        if self.heads < 1 or self.dim % self.heads:
            raise ValueError(f"attention dim {self.dim} is not divisible by heads {self.heads}")
        if self.window < 1:
            raise ValueError("attention window must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @classmethod
    def for_dim(cls, dim: int, window: int = WINDOW, use_rel_bias: bool = True) -> "AttentionConfig":
        return cls(dim, default_heads(dim), window, use_rel_bias)


@dataclass(frozen=True)
class MBConvSpec:
    in_channels: int
    out_channels: int
    stride: int = 1
    expansion: float = 4.0
    se_ratio: float = 0.25

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ValueError(f"MBConv stride must be 1 or 2, got {self.stride}")

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.out_channels * self.expansion)))

    @property
    def se_channels(self) -> int:
        return max(1, int(self.in_channels * self.se_ratio))

    @property
    def has_residual(self) -> bool:
        """True when the shortcut is the identity."""
        return self.stride == 1 and self.in_channels == self.out_channels


# ---------------------------------------------------------------------------
# window partitioning


def _check_divisible(h: int, w: int, p: int) -> None:
    if h % p or w % p:
        raise ValueError(f"feature map {h}x{w} is not divisible by window {p}")


def block_partition(x: Tensor, p: int) -> Tensor:
    """NCHW -> (N*H/P*W/P, P*P, C): non-overlapping local P x P windows."""
    n, c, h, w = x.shape
    _check_divisible(h, w, p)
    t = x.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return t.reshape(n * (h // p) * (w // p), p * p, c)


def block_unpartition(tokens: Tensor, shape: tuple, p: int) -> Tensor:
    n, c, h, w = shape
    _check_divisible(h, w, p)
    t = tokens.reshape(n, h // p, w // p, p, p, c).transpose(0, 5, 1, 3, 2, 4)
    return t.reshape(n, c, h, w)


def grid_partition(x: Tensor, p: int) -> Tensor:
    """NCHW -> (N*H/P*W/P, P*P, C): each window samples a P x P grid with
    stride (H/P, W/P), so its tokens span the whole map."""
    n, c, h, w = x.shape
    _check_divisible(h, w, p)
    t = x.reshape(n, c, p, h // p, p, w // p).transpose(0, 3, 5, 2, 4, 1)
    return t.reshape(n * (h // p) * (w // p), p * p, c)


def grid_unpartition(tokens: Tensor, shape: tuple, p: int) -> Tensor:
    n, c, h, w = shape
    _check_divisible(h, w, p)
    t = tokens.reshape(n, h // p, w // p, p, p, c).transpose(0, 5, 3, 1, 4, 2)
    return t.reshape(n, c, h, w)


PARTITIONS = {
    "block": (block_partition, block_unpartition),
    "grid": (grid_partition, grid_unpartition),
}


# ---------------------------------------------------------------------------
# attention


@lru_cache(maxsize=None)
def relative_position_index(p: int) -> np.ndarray:
    """(P*P, P*P) indices into a flattened (2P-1)^2 bias table."""
    coords = np.stack(np.meshgrid(np.arange(p), np.arange(p), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (p - 1)
    return rel[0] * (2 * p - 1) + rel[1]


def init_attention(init: Initializer, prefix: str, cfg: AttentionConfig) -> None:
    # A key bias shifts every score in a softmax row equally and never
    # receives gradient, so only queries and values carry a bias.
    init.linear(f"{prefix}.qkv", cfg.dim, 3 * cfg.dim, bias=False)
    init.zeros(f"{prefix}.q_bias", (cfg.dim,))
    init.zeros(f"{prefix}.v_bias", (cfg.dim,))
    init.linear(f"{prefix}.proj", cfg.dim, cfg.dim)
    if cfg.use_rel_bias:
        init.table(f"{prefix}.rel_bias", (cfg.heads, (2 * cfg.window - 1) ** 2))


def window_attention(
    ctx: Context, prefix: str, tokens: Tensor, cfg: AttentionConfig, return_weights: bool = False
):
    """Multi-head scaled dot-product attention inside each window."""
    b, t, d = tokens.shape
    if d != cfg.dim:
        raise ValueError(f"token dim {d} does not match attention dim {cfg.dim}")
    h, hd = cfg.heads, cfg.head_dim
    qkv = F.linear(tokens, ctx[f"{prefix}.qkv.weight"])
    qkv = qkv.reshape(b, t, 3, h, hd).transpose(2, 0, 3, 1, 4)  # 3,B,h,T,hd
    q = qkv[0] + ctx[f"{prefix}.q_bias"].reshape(h, 1, hd)
    k = qkv[1]
    v = qkv[2] + ctx[f"{prefix}.v_bias"].reshape(h, 1, hd)
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(hd))
    if cfg.use_rel_bias:
        if t != cfg.window * cfg.window:
            raise ValueError(f"relative bias needs {cfg.window ** 2} tokens per window, got {t}")
        idx = relative_position_index(cfg.window)
        scores = scores + ctx[f"{prefix}.rel_bias"].take(idx, axis=1)  # h,T,T
    weights = F.softmax(scores, axis=-1)
    out = (weights @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    out = F.linear(out, ctx[f"{prefix}.proj.weight"], ctx[f"{prefix}.proj.bias"])
    return (out, weights) if return_weights else out


def init_ffn(init: Initializer, prefix: str, dim: int, ratio: int = 4) -> None:
    init.linear(f"{prefix}.fc1", dim, ratio * dim)
    init.linear(f"{prefix}.fc2", ratio * dim, dim)


def ffn(ctx: Context, prefix: str, x: Tensor) -> Tensor:
    hidden = F.gelu(F.linear(x, ctx[f"{prefix}.fc1.weight"], ctx[f"{prefix}.fc1.bias"]))
    return F.linear(hidden, ctx[f"{prefix}.fc2.weight"], ctx[f"{prefix}.fc2.bias"])


def init_attention_sublayer(init: Initializer, prefix: str, cfg: AttentionConfig) -> None:
    init.layernorm(f"{prefix}.norm1", cfg.dim)
    init_attention(init, f"{prefix}.attn", cfg)
    init.layernorm(f"{prefix}.norm2", cfg.dim)
    init_ffn(init, f"{prefix}.ffn", cfg.dim)


def attention_sublayer(ctx: Context, prefix: str, x: Tensor, cfg: AttentionConfig, mode: str) -> Tensor:
    """Pre-norm attention + FFN on block or grid windows of an NCHW map.

    The map is zero-padded right/bottom to a multiple of the window and
    cropped back afterwards.
    """
    partition, unpartition = PARTITIONS[mode]
    p = cfg.window
    n, c, h, w = x.shape
    ph, pw = -h % p, -w % p
    xp = x.pad(((0, 0), (0, 0), (0, ph), (0, pw)))
    t = partition(xp, p)
    t = t + window_attention(ctx, f"{prefix}.attn", _ln(ctx, f"{prefix}.norm1", t), cfg)
    t = t + ffn(ctx, f"{prefix}.ffn", _ln(ctx, f"{prefix}.norm2", t))
    out = unpartition(t, xp.shape, p)
    if ph or pw:
        out = out[:, :, :h, :w]
    return out


def _ln(ctx: Context, prefix: str, x: Tensor) -> Tensor:
    return F.layer_norm(x, ctx[f"{prefix}.weight"], ctx[f"{prefix}.bias"])


# ---------------------------------------------------------------------------
# convolutional pieces


def bn(ctx: Context, prefix: str, x: Tensor) -> Tensor:
    return F.batchnorm2d(
        x,
        ctx[f"{prefix}.weight"],
        ctx[f"{prefix}.bias"],
        ctx.params.bn_state(prefix),
        training=ctx.training,
        eps=ctx.bn_eps,
        momentum=ctx.bn_momentum,
    )


def conv(ctx: Context, prefix: str, x: Tensor, **kwargs) -> Tensor:
    bias_name = f"{prefix}.bias"
    bias = ctx[bias_name] if bias_name in ctx.params else None
    return F.conv2d(x, ctx[f"{prefix}.weight"], bias, **kwargs)


def init_mbconv(init: Initializer, prefix: str, spec: MBConvSpec) -> None:
    init.batchnorm(f"{prefix}.pre_norm", spec.in_channels)
    init.conv(f"{prefix}.expand", spec.hidden, spec.in_channels, 1, bias=False)
    init.conv(f"{prefix}.dw", spec.hidden, 1, 3, bias=False)
    init.batchnorm(f"{prefix}.dw_norm", spec.hidden)
    init.conv(f"{prefix}.se_reduce", spec.se_channels, spec.hidden, 1)
    init.conv(f"{prefix}.se_expand", spec.hidden, spec.se_channels, 1)
    init.conv(f"{prefix}.project", spec.out_channels, spec.hidden, 1)
    if spec.in_channels != spec.out_channels:
        init.conv(f"{prefix}.shortcut", spec.out_channels, spec.in_channels, 1)


def mbconv(ctx: Context, prefix: str, x: Tensor, spec: MBConvSpec) -> Tensor:
    """Inverted residual: pre-norm, 1x1 expand, depthwise 3x3, SE, 1x1 project.

    The shortcut is the identity when shapes match; otherwise it is a 2x2
    average pool (stride 2) and/or a 1x1 projection.
    """
    if x.shape[1] != spec.in_channels:
        raise ValueError(f"{prefix}: expected {spec.in_channels} channels, got {x.shape[1]}")
    h = bn(ctx, f"{prefix}.pre_norm", x)
    h = F.gelu(conv(ctx, f"{prefix}.expand", h))
    h = conv(ctx, f"{prefix}.dw", h, stride=spec.stride, padding=1, groups=spec.hidden)
    h = F.gelu(bn(ctx, f"{prefix}.dw_norm", h))
    s = h.mean(axis=(2, 3), keepdims=True)
    s = F.gelu(conv(ctx, f"{prefix}.se_reduce", s))
    h = h * conv(ctx, f"{prefix}.se_expand", s).sigmoid()
    h = conv(ctx, f"{prefix}.project", h)
    return _shortcut(ctx, prefix, x, spec) + h


def _shortcut(ctx: Context, prefix: str, x: Tensor, spec: MBConvSpec) -> Tensor:
    if spec.stride == 2:
        n, c, hh, ww = x.shape
        if hh % 2 or ww % 2:
            raise ValueError(f"{prefix}: stride-2 MBConv needs even extents, got {hh}x{ww}")
        x = x.reshape(n, c, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5))
    if spec.in_channels != spec.out_channels:
        x = conv(ctx, f"{prefix}.shortcut", x)
    return x


def init_maxvit(init: Initializer, prefix: str, spec: MBConvSpec, cfg: AttentionConfig) -> None:
    if cfg.dim != spec.out_channels:
        raise ValueError(f"attention dim {cfg.dim} must equal MBConv output channels {spec.out_channels}")
    init_mbconv(init, f"{prefix}.mbconv", spec)
    init_attention_sublayer(init, f"{prefix}.block", cfg)
    init_attention_sublayer(init, f"{prefix}.grid", cfg)


def maxvit_block(ctx: Context, prefix: str, x: Tensor, spec: MBConvSpec, cfg: AttentionConfig) -> Tensor:
    """MBConv followed by block attention and grid attention."""
    x = mbconv(ctx, f"{prefix}.mbconv", x, spec)
    x = attention_sublayer(ctx, f"{prefix}.block", x, cfg, "block")
    return attention_sublayer(ctx, f"{prefix}.grid", x, cfg, "grid")
