"""Four-stage hybrid CNN / spatial-reduction-attention encoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, ShapeError
from .layers import (
    BatchNorm2d,
    Conv2d,
    ConvBNReLU,
    Linear,
    Module,
    ModuleList,
    PatchEmbed,
    PatchMerge,
    dwconv3x3,
    grid_to_tokens,
    linear,
    pwconv1x1,
    space_to_depth,
    tokens_to_grid,
)

ABLATIONS = ("full", "cnn_only", "transformer_only", "fuse_add")


@dataclass
class EncoderConfig:
    depths: list = field(default_factory=lambda: [3, 4, 6, 3])
    channels: list = field(default_factory=lambda: [64, 128, 256, 512])
    heads: list = field(default_factory=lambda: [1, 2, 4, 8])
    reductions: list = field(default_factory=lambda: [8, 4, 2, 1])
    ablation: str = "full"
    lgff_layers: int = 2

    def validate(self):
        for name in ("depths", "channels", "heads", "reductions"):
            val = getattr(self, name)
            if len(val) != 4 or any(int(v) < 1 for v in val):
                raise ConfigError(f"encoder.{name} needs four positive entries, got {val}")
        for c, h in zip(self.channels, self.heads):
            if c % h:
                raise ConfigError(f"encoder: {c} channels not divisible by {h} heads")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"encoder.ablation must be one of {ABLATIONS}, got {self.ablation!r}")
        if self.lgff_layers < 2:
            raise ConfigError("encoder.lgff_layers must be >= 2")
        return self


# ---------------------------------------------------------------------------
# CNN branch
# ---------------------------------------------------------------------------

def cnn_block(x, dw_weight, bn, pw_weight, pw_bias=None, dw_bias=None):
    """Residual depthwise-separable transform ``x + PW(BN(DW(x)))``."""
    if x.shape[1] != dw_weight.shape[0]:
        raise ShapeError(f"cnn_block: input has {x.shape[1]} channels, kernel expects {dw_weight.shape[0]}")
    return x + pwconv1x1(bn(dwconv3x3(x, dw_weight, dw_bias)), pw_weight, pw_bias)


class CNNBlock(Module):
    def __init__(self, channels, rng):
        super().__init__()
        self.dw = Conv2d(channels, channels, 3, padding=1, groups=channels, bias=False, rng=rng)
        self.bn = BatchNorm2d(channels)
        self.pw = Conv2d(channels, channels, 1, rng=rng)

    def forward(self, x):
        return cnn_block(x, self.dw.weight, self.bn, self.pw.weight, self.pw.bias, self.dw.bias)


# ---------------------------------------------------------------------------
# attention branch
# ---------------------------------------------------------------------------

def split_heads(x, heads):
    b, n, c = x.shape
    return x.reshape(b, n, heads, c // heads).permute(0, 2, 1, 3)


def merge_heads(x):
    b, h, n, d = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, n, h * d)


def attention_weights(q, k, negate=False):
    """Row-stochastic weights ``softmax(+-q k^T / sqrt(d))`` over the key axis."""
    logits = ag.matmul(q, k.transpose(-2, -1)) * (1.0 / math.sqrt(q.shape[-1]))
    if negate:
        logits = -logits
    return ag.softmax(logits, axis=-1)


def sra_attention(x, grid_hw, params, reduction, heads, return_weights=False):
    """Multi-head self-attention whose keys/values come from an R x R reduced grid.

    ``x`` is ``[B, H*W, C]``; ``params`` provides ``q, k, v, out`` linear
    layers and, when ``reduction > 1``, ``sr`` (the ``R*R*C -> C`` merge
    projection).
    """
    h, w = grid_hw
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"sra_attention: {n} tokens for a {h}x{w} grid")
    if c % heads:
        raise ShapeError(f"sra_attention: {c} channels not divisible by {heads} heads")
    if h % reduction or w % reduction:
        raise ShapeError(f"sra_attention: {h}x{w} token grid not divisible by reduction {reduction}")
    q = split_heads(params.q(x), heads)
    if reduction > 1:
        merged = space_to_depth(tokens_to_grid(x, h, w), reduction)
        src = params.sr(merged.reshape(b, (h // reduction) * (w // reduction), reduction * reduction * c))
    else:
        src = x
    k = split_heads(params.k(src), heads)
    v = split_heads(params.v(src), heads)
    attn = attention_weights(q, k)
    out = params.out(merge_heads(ag.matmul(attn, v)))
    return (out, attn) if return_weights else out


class SRAttention(Module):
    def __init__(self, channels, heads, reduction, rng):
        super().__init__()
        self.heads, self.reduction = heads, reduction
        self.q = Linear(channels, channels, rng=rng)
        # a key bias shifts each softmax row by a constant: no effect, zero gradient
        self.k = Linear(channels, channels, bias=False, rng=rng)
        self.v = Linear(channels, channels, rng=rng)
        self.out = Linear(channels, channels, rng=rng)
        if reduction > 1:
            self.sr = Linear(reduction * reduction * channels, channels, rng=rng)

    def forward(self, x, grid_hw, return_weights=False):
        return sra_attention(x, grid_hw, self, self.reduction, self.heads, return_weights)


# ---------------------------------------------------------------------------
# local-global fusion
# ---------------------------------------------------------------------------

def lgff_combine(f_local, f_global, weight_map):
    """``F_L * W + F_G * (1 - W)`` with ``W`` ``[B, 1, H, W]`` broadcast over channels."""
    if f_local.shape != f_global.shape:
        raise ShapeError(f"lgff: local {f_local.shape} and global {f_global.shape} differ")
    out = f_local * weight_map + f_global * (1.0 - weight_map)
    # rounding can leave the [min, max] envelope by an ulp; a constant
    # correction snaps it back exactly without touching the gradient
    lo = np.minimum(f_local.data, f_global.data)
    hi = np.maximum(f_local.data, f_global.data)
    fix = np.clip(out.data, lo, hi) - out.data
    return out + ag.Tensor(fix) if fix.any() else out


class LGFF(Module):
    """Gate network: concat -> (conv3x3-bn-relu)* -> conv3x3 -> sigmoid."""

    def __init__(self, channels, layers=2, rng=None):
        super().__init__()
        self.stack = ModuleList([ConvBNReLU(2 * channels, channels, 3, rng=rng)])
        for _ in range(layers - 2):
            self.stack.append(ConvBNReLU(channels, channels, 3, rng=rng))
        self.head = Conv2d(channels, 1, 3, padding=1, rng=rng)

    def gate(self, f_local, f_global):
        y = ag.concat([f_local, f_global], axis=1)
        for layer in self.stack:
            y = layer(y)
        return ag.sigmoid(self.head(y))

    def forward(self, f_local, f_global, weight_map=None):
        if weight_map is None:
            weight_map = self.gate(f_local, f_global)
        return lgff_combine(f_local, f_global, weight_map)


def lgff_fuse(f_local, f_global, params, weight_map=None):
    return params(f_local, f_global, weight_map)


# ---------------------------------------------------------------------------
# UDFE block and stages
# ---------------------------------------------------------------------------

class UDFEBlock(Module):
    def __init__(self, channels, heads, reduction, ablation="full", lgff_layers=2, rng=None):
        super().__init__()
        self.ablation = ablation
        if ablation != "transformer_only":
            self.cnn = CNNBlock(channels, rng)
        if ablation != "cnn_only":
            self.attn = SRAttention(channels, heads, reduction, rng)
        if ablation == "full":
            self.lgff = LGFF(channels, lgff_layers, rng)

    def global_branch(self, x):
        h, w = x.shape[-2:]
        return tokens_to_grid(self.attn(grid_to_tokens(x), (h, w)), h, w)

    def forward(self, x):
        if self.ablation == "cnn_only":
            return self.cnn(x)
        if self.ablation == "transformer_only":
            return self.global_branch(x)
        f_local = self.cnn(x)
        f_global = self.global_branch(x)
        if self.ablation == "fuse_add":
            return f_local + f_global
        return self.lgff(f_local, f_global)


def udfe_block(x, params):
    return params(x)


class EncoderStage(Module):
    def __init__(self, index, in_ch, out_ch, depth, heads, reduction, ablation, lgff_layers, rng):
        super().__init__()
        self.down = PatchEmbed(in_ch, out_ch, 4, rng=rng) if index == 0 else PatchMerge(in_ch, out_ch, rng=rng)
        self.blocks = ModuleList(UDFEBlock(out_ch, heads, reduction, ablation, lgff_layers, rng)
                                 for _ in range(depth))

    def forward(self, x):
        x = self.down(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class Encoder(Module):
    """Produces features ``[E1, E2, E3, E4]`` at 1/4, 1/8, 1/16, 1/32 scale."""

    def __init__(self, cfg: EncoderConfig, rng=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(0)
        ins = [3] + list(cfg.channels[:3])
        self.stages = ModuleList(
            EncoderStage(i, ins[i], cfg.channels[i], cfg.depths[i], cfg.heads[i],
                         cfg.reductions[i], cfg.ablation, cfg.lgff_layers, rng)
            for i in range(4))

    def forward(self, image):
        h, w = image.shape[-2:]
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"encode expects [B, 3, H, W], got {image.shape}")
        if h % 32 or w % 32:
            raise ShapeError(f"encode: input {h}x{w} not divisible by 32")
        feats = []
        x = image
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


def encode(image, encoder: Encoder):
    return encoder(image)
