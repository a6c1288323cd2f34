"""Transmission-guided decoder: UDIA cross-attention, decode stages, depth head."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import attention_weights, merge_heads, split_heads
from .errors import ConfigError, ShapeError
from .layers import (
    Conv2d,
    ConvBNReLU,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    TokenBatchNorm,
    avgpool_array,
    bilinear_upsample2x,
    grid_to_tokens,
    tokens_to_grid,
)

GUIDANCE = ("udia", "none", "hef_only", "mtm_only")


@dataclass
class DecoderConfig:
    channels: list = field(default_factory=lambda: [256, 128, 64, 32])
    heads: int = 1
    guidance: str = "udia"
    norm: str = "layer"

    def validate(self):
        if len(self.channels) != 4 or any(int(c) < 1 for c in self.channels):
            raise ConfigError(f"decoder.channels needs four positive entries, got {self.channels}")
        if self.guidance not in GUIDANCE:
            raise ConfigError(f"decoder.guidance must be one of {GUIDANCE}, got {self.guidance!r}")
        if self.norm not in ("layer", "batch"):
            raise ConfigError(f"decoder.norm must be 'layer' or 'batch', got {self.norm!r}")
        if self.heads < 1:
            raise ConfigError("decoder.heads must be >= 1")
        return self


def invert_transmission(t):
    """``1 - T``: a map that grows with depth."""
    return 1.0 - t


def udia_aggregate(e_tokens, tbar_tokens, params, zero_context=False, return_weights=False):
    """Negated-logit cross-attention of inverted transmission over encoder tokens.

    ``Q = T̄ W_q`` (1 -> C), ``K = E W_k``, ``V = E W_v``;
    ``I = softmax(-Q K^T / sqrt(d)) V`` and the result is ``E + Norm(I)``.
    ``zero_context`` replaces ``I`` by zeros (test hook).
    """
    b, n, c = e_tokens.shape
    if tbar_tokens.shape != (b, n, 1):
        raise ShapeError(f"udia: guidance {tbar_tokens.shape} does not match features {e_tokens.shape}")
    heads = params.heads
    if c % heads:
        raise ShapeError(f"udia: {c} channels not divisible by {heads} heads")
    q = split_heads(params.q(tbar_tokens), heads)
    k = split_heads(params.k(e_tokens), heads)
    v = split_heads(params.v(e_tokens), heads)
    attn = attention_weights(q, k, negate=True)
    context = merge_heads(ag.matmul(attn, v))
    if zero_context:
        context = Tensor._wrap(np.zeros(context.shape, dtype=context.dtype))
    out = e_tokens + params.norm(context)
    return (out, attn) if return_weights else out


class UDIA(Module):
    def __init__(self, channels, heads=1, norm="layer", rng=None):
        super().__init__()
        self.heads = heads
        self.q = Linear(1, channels, rng=rng)
        # a key bias shifts each softmax row by a constant: no effect, zero gradient
        self.k = Linear(channels, channels, bias=False, rng=rng)
        # batch norm over tokens cancels a per-channel value bias; layer norm does not
        self.v = Linear(channels, channels, bias=norm == "layer", rng=rng)
        self.norm = LayerNorm(channels) if norm == "layer" else TokenBatchNorm(channels)

    def forward(self, e_grid, tbar_grid, zero_context=False):
        h, w = e_grid.shape[-2:]
        out = udia_aggregate(grid_to_tokens(e_grid), grid_to_tokens(tbar_grid), self, zero_context)
        return tokens_to_grid(out, h, w)


class DecodeStage(Module):
    """``UP(conv-bn-relu(concat(F_i, D_i)))``; the last stage skips ``UP``."""

    def __init__(self, in_ch, out_ch, upsample=True, rng=None):
        super().__init__()
        self.block = ConvBNReLU(in_ch, out_ch, 3, rng=rng)
        self.upsample = upsample

    def forward(self, guide, d):
        if guide is not None:
            if guide.shape[-2:] != d.shape[-2:]:
                raise ShapeError(f"decode_stage: guidance {guide.shape} and decoder feature {d.shape} "
                                 "differ spatially")
            d = ag.concat([guide, d], axis=1)
        y = self.block(d)
        return bilinear_upsample2x(y) if self.upsample else y


def decode_stage(guide, d, params):
    return params(guide, d)


class DepthHead(Module):
    """1x1 conv -> sigmoid -> two bilinear 2x upsamples (1/4 scale -> full)."""

    def __init__(self, in_ch, rng=None):
        super().__init__()
        self.proj = Conv2d(in_ch, 1, 1, rng=rng)

    def forward(self, d1):
        return predict_depth_from_logits(self.proj(d1))


def predict_depth_from_logits(logits):
    depth = bilinear_upsample2x(bilinear_upsample2x(ag.sigmoid(logits)))
    # a saturated sigmoid rounds to exactly 0 or 1; a constant correction
    # moves those pixels one step inside (0, 1) and leaves the gradient alone
    info = np.finfo(depth.dtype)
    fix = np.clip(depth.data, info.tiny, 1.0 - info.epsneg) - depth.data
    return depth + Tensor._wrap(fix) if fix.any() else depth


def predict_depth(d1, params):
    return params(d1)


class Decoder(Module):
    def __init__(self, enc_channels, cfg: DecoderConfig, rng=None):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(1)
        widths = list(cfg.channels)
        self.seed = Conv2d(enc_channels[3], widths[0], 1, rng=rng)
        self.guides = ModuleList()
        self.stages = ModuleList()
        prev = widths[0]
        for k, i in enumerate((3, 2, 1, 0)):
            c = enc_channels[i]
            if cfg.guidance == "udia":
                self.guides.append(UDIA(c, cfg.heads, cfg.norm, rng=rng))
            elif cfg.guidance == "mtm_only":
                self.guides.append(Conv2d(1, c, 1, rng=rng))
            in_ch = prev + (0 if cfg.guidance == "none" else c)
            self.stages.append(DecodeStage(in_ch, widths[k], upsample=i > 0, rng=rng))
            prev = widths[k]
        self.head = DepthHead(prev, rng=rng)

    def guidance(self, k, feat, tbar):
        mode = self.cfg.guidance
        if mode == "none":
            return None
        if mode == "hef_only":
            return feat
        tb = Tensor._wrap(tbar.astype(feat.dtype))
        if mode == "mtm_only":
            return self.guides[k](tb)
        return self.guides[k](feat, tb)

    def forward(self, feats, transmission):
        """``feats`` = [E1..E4]; ``transmission`` is a ``[B, 1, H, W]`` array."""
        transmission = np.asarray(transmission)
        if transmission.ndim != 4 or transmission.shape[1] != 1:
            raise ShapeError(f"transmission must be [B, 1, H, W], got {transmission.shape}")
        tbar = invert_transmission(transmission)
        d = self.seed(feats[3])
        for k, i in enumerate((3, 2, 1, 0)):
            e = feats[i]
            tb = avgpool_array(tbar, *e.shape[-2:])
            d = self.stages[k](self.guidance(k, e, tb), d)
        return self.head(d)


def decode(feats, transmission, decoder: Decoder):
    return decoder(feats, transmission)
