"""Neural-network building blocks on top of :mod:`umono.autograd`.

Functional forms (``conv2d``, ``batchnorm2d``, ...) take parameters
explicitly; the ``Module`` classes own their parameters and buffers and
expose them through ``named_parameters`` / ``state_dict`` in a stable,
insertion-ordered naming scheme.
"""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

BN_MOMENTUM = 0.1
BN_EPS = 1e-5
LN_EPS = 1e-5


# ---------------------------------------------------------------------------
# module plumbing
# ---------------------------------------------------------------------------

class Module:
    """Container of parameters, buffers and child modules."""

    def __init__(self):
        self.training = True
        self._buffers = []

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def register_buffer(self, name, value):
        setattr(self, name, np.asarray(value, dtype=ag.get_default_dtype()))
        self._buffers.append(name)

    def _children(self):
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(val, (Module, Tensor)):
                yield key, val
            elif isinstance(val, ModuleList):
                for i, m in enumerate(val):
                    yield f"{key}.{i}", m

    def named_parameters(self, prefix=""):
        for key, val in self._children():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + key, val
            else:
                yield from val.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, self, name
        for key, val in self._children():
            if isinstance(val, Module):
                yield from val.named_buffers(prefix + key + ".")

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def state_dict(self):
        """Parameters then buffers, name -> array (no copies)."""
        out = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, owner, attr in self.named_buffers():
            out[name] = getattr(owner, attr)
        return out

    def load_state_dict(self, state, strict=True):
        own = self.state_dict()
        if strict:
            missing = [k for k in own if k not in state]
            extra = [k for k in state if k not in own]
            if missing or extra:
                raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        params = dict(self.named_parameters())
        buffers = {name: (owner, attr) for name, owner, attr in self.named_buffers()}
        for name, value in state.items():
            if name not in own:
                continue
            value = np.asarray(value)
            if value.shape != own[name].shape:
                raise ShapeError(f"{name}: stored shape {value.shape} != model shape {own[name].shape}")
            if name in params:
                params[name].data = value.astype(params[name].dtype, copy=True)
            else:
                owner, attr = buffers[name]
                setattr(owner, attr, value.astype(getattr(owner, attr).dtype, copy=True))

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class ModuleList(list):
    """Plain list whose members are registered as numbered children."""


def kaiming_uniform(shape, fan_in, rng):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _param(arr):
    return Tensor(arr, requires_grad=True)


# ---------------------------------------------------------------------------
# functional layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    """``x[..., in] @ weight[in, out] + bias``."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input features {x.shape} do not match weight {weight.shape}")
    y = ag.matmul(x, weight)
    return y + bias if bias is not None else y


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Cross-correlation of ``x[B, C, H, W]`` with ``weight[O, C/groups, kh, kw]``."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects [B, C, H, W], got {x.shape}")
    b, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if c != cg * groups or o % groups:
        raise ShapeError(f"conv2d: input channels {c} incompatible with kernel {weight.shape} (groups={groups})")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError(f"conv2d: {h}x{w} input with padding {padding} is smaller than "
                         f"the {kh}x{kw} kernel")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    og = o // groups
    if kh == kw == 1 and stride == 1 and padding == 0:
        cols = x.reshape(b, groups, cg, h * w)
    else:
        cols = ag.unfold2d(ag.pad2d(x, padding), kh, kw, stride)
        cols = cols.reshape(b, groups, cg * kh * kw, ho * wo)
    kern = weight.reshape(groups, og, cg * kh * kw)
    y = ag.matmul(kern, cols).reshape(b, o, ho, wo)
    if bias is not None:
        y = y + bias.reshape(1, o, 1, 1)
    return y


def dwconv3x3(x, weight, bias=None):
    """3x3 depthwise convolution, same padding; ``weight`` is ``[C, 1, 3, 3]``."""
    return conv2d(x, weight, bias, stride=1, padding=1, groups=x.shape[1])


def pwconv1x1(x, weight, bias=None):
    """1x1 pointwise convolution; ``weight`` is ``[O, C, 1, 1]``."""
    return conv2d(x, weight, bias)


def batchnorm2d(x, gamma, beta, running_mean, running_var, training,
                momentum=BN_MOMENTUM, eps=BN_EPS):
    """Batch normalization over ``(B, H, W)`` per channel.

    In training mode ``running_mean``/``running_var`` are updated in place
    (unbiased variance, as is conventional).  Returns the normalized tensor.
    """
    c = x.shape[1]
    if training:
        mu = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
        n = x.size // c
        bvar = var.data.reshape(c) * (n / (n - 1) if n > 1 else 1.0)
        running_mean *= 1 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1 - momentum
        running_var += momentum * bvar
        xhat = centered / ag.sqrt(var + eps)
    else:
        mu = running_mean.reshape(1, c, 1, 1).astype(x.dtype)
        inv = (1.0 / np.sqrt(running_var + eps)).reshape(1, c, 1, 1).astype(x.dtype)
        xhat = (x - mu) * inv
    return xhat * gamma.reshape(1, c, 1, 1) + beta.reshape(1, c, 1, 1)


def layernorm(x, gamma, beta, eps=LN_EPS):
    """Normalize each position over the trailing channel axis, then affine."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return centered / ag.sqrt(var + eps) * gamma + beta


def _interp_matrix(n, dtype):
    # align_corners=False: source coordinate (o + 0.5) / 2 - 0.5, clamped
    m = np.zeros((2 * n, n), dtype=dtype)
    for o in range(2 * n):
        src = max((o + 0.5) / 2 - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[o, i0] += 1 - frac
        m[o, i1] += frac
    return m


def bilinear_upsample2x(x):
    """Bilinear 2x upsampling of ``[B, C, H, W]`` (align-corners=False)."""
    h, w = x.shape[-2:]
    uh = _interp_matrix(h, x.dtype)
    uw = _interp_matrix(w, x.dtype)
    return ag.matmul(uh, ag.matmul(x, uw.T))


def space_to_depth(x, r):
    """``[B, C, H, W]`` -> ``[B, H/r, W/r, r*r*C]`` grouping each r x r block.

    Channel order of the merged vector is (dy, dx, c).
    """
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"cannot merge {r}x{r} blocks of a {h}x{w} grid")
    y = x.reshape(b, c, h // r, r, w // r, r).permute(0, 2, 4, 3, 5, 1)
    return y.reshape(b, h // r, w // r, r * r * c)


def patch_embed(x, weight, bias=None, patch=4):
    """Non-overlapping ``patch`` x ``patch`` projection (stride-``patch`` conv)."""
    h, w = x.shape[-2:]
    if h % patch or w % patch:
        raise ShapeError(f"patch_embed: {h}x{w} not divisible by patch {patch}")
    return conv2d(x, weight, bias, stride=patch)


def patch_merge(x, weight, bias=None):
    """Concatenate 2x2 neighbourhoods (4C) and project to ``weight.shape[1]``."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise ShapeError(f"patch_merge needs even extents, got {h}x{w}")
    y = linear(space_to_depth(x, 2), weight, bias)
    return y.permute(0, 3, 1, 2)


def avgpool_to(x, th, tw):
    """Block-mean pooling of ``[B, C, H, W]`` down to ``th`` x ``tw``."""
    b, c, h, w = x.shape
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ShapeError(f"avgpool_to: target {th}x{tw} does not divide {h}x{w}")
    return x.reshape(b, c, th, h // th, tw, w // tw).mean(axis=(3, 5))


def avgpool_array(x: np.ndarray, th: int, tw: int) -> np.ndarray:
    """numpy twin of :func:`avgpool_to` for constant inputs (no tape)."""
    b, c, h, w = x.shape
    if th <= 0 or tw <= 0 or h % th or w % tw:
        raise ShapeError(f"avgpool_to: target {th}x{tw} does not divide {h}x{w}")
    return x.reshape(b, c, th, h // th, tw, w // tw).mean(axis=(3, 5))


def grid_to_tokens(x):
    """``[B, C, H, W]`` -> ``[B, H*W, C]`` (row-major tokens)."""
    b, c, h, w = x.shape
    return x.reshape(b, c, h * w).permute(0, 2, 1)


def tokens_to_grid(x, h, w):
    b, n, c = x.shape
    if n != h * w:
        raise ShapeError(f"{n} tokens cannot form a {h}x{w} grid")
    return x.permute(0, 2, 1).reshape(b, c, h, w)


# ---------------------------------------------------------------------------
# modules
# ---------------------------------------------------------------------------

class Linear(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.weight = _param(kaiming_uniform((in_features, out_features), in_features, rng))
        self.bias = _param(np.zeros(out_features)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, stride=1, padding=0, groups=1, bias=True, rng=None):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        fan_in = (in_ch // groups) * kernel * kernel
        self.weight = _param(kaiming_uniform((out_ch, in_ch // groups, kernel, kernel), fan_in, rng))
        self.bias = _param(np.zeros(out_ch)) if bias else None
        self.stride, self.padding, self.groups = stride, padding, groups

    def forward(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        if x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"batchnorm: {x.shape[1]} channels, expected {self.gamma.shape[0]}")
        return batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           self.training, self.momentum, self.eps)


class LayerNorm(Module):
    def __init__(self, channels, eps=LN_EPS):
        super().__init__()
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.eps = eps

    def forward(self, x):
        return layernorm(x, self.gamma, self.beta, self.eps)


class TokenBatchNorm(Module):
    """Batch normalization applied to ``[B, N, C]`` token sequences."""

    def __init__(self, channels):
        super().__init__()
        self.bn = BatchNorm2d(channels)

    def forward(self, x):
        b, n, c = x.shape
        y = self.bn(x.permute(0, 2, 1).reshape(b, c, n, 1))
        return y.reshape(b, c, n).permute(0, 2, 1)


class ConvBNReLU(Module):
    def __init__(self, in_ch, out_ch, kernel=3, rng=None):
        super().__init__()
        # no conv bias: the batch-norm shift absorbs it
        self.conv = Conv2d(in_ch, out_ch, kernel, padding=kernel // 2, bias=False, rng=rng)
        self.bn = BatchNorm2d(out_ch)

    def forward(self, x):
        return ag.relu(self.bn(self.conv(x)))


class PatchEmbed(Module):
    """Stride-4 4x4 patch projection from the RGB image."""

    def __init__(self, in_ch, out_ch, patch=4, rng=None):
        super().__init__()
        self.proj = Conv2d(in_ch, out_ch, patch, stride=patch, rng=rng)
        self.patch = patch

    def forward(self, x):
        return patch_embed(x, self.proj.weight, self.proj.bias, self.patch)


class PatchMerge(Module):
    def __init__(self, in_ch, out_ch, rng=None):
        super().__init__()
        self.proj = Linear(4 * in_ch, out_ch, rng=rng)

    def forward(self, x):
        return patch_merge(x, self.proj.weight, self.proj.bias)
