"""Finite-difference gradient checks for every layer and composite.

Each case builds a random instance (inputs plus parameters) from a trial
seed, reduces the output to a scalar with a random projection and compares
the tape gradient of every leaf with central differences at 64-bit.
Large leaves are checked on a seeded subset of coordinates.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import layers as L
from .autograd import Tensor
from .decoder import UDIA, DecoderConfig, DecodeStage, DepthHead, udia_aggregate
from .encoder import LGFF, CNNBlock, EncoderConfig, SRAttention, UDFEBlock, lgff_combine
from .model import UMono
from .objective import LossConfig, l2_loss, silog_loss, umono_loss

SCOPES = ("layer", "encoder", "decoder", "full")
LAYER_TOL = 1e-5
COMPOSITE_TOL = 1e-4
STEP = 1e-5
# absolute floor in the relative-error denominator; gradients smaller than
# this are compared on an absolute scale (central differences carry ~1e-11 noise)
EPS = 1e-6
# deep composites stack many ReLUs: a coordinate whose probe pair straddles
# a kink is retried at 10x and 100x smaller steps.  Their losses are O(10) and their
# difference quotients carry ~1e-9 noise, hence the larger floor.
COMPOSITE_STEPS = (1e-5, 1e-6, 1e-7)
COMPOSITE_EPS = 1e-5


@dataclass
class GradCheckResult:
    name: str
    scope: str
    trials: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def line(self) -> str:
        flag = "PASS" if self.passed else "FAIL"
        return (f"{flag} {self.scope:<7} {self.name:<22} trials={self.trials} "
                f"max_err={self.max_error:.3e} tol={self.tolerance:.0e} ({self.seconds:.2f}s)")


def _leaf(rng, shape, scale=1.0, low=None):
    if low is not None:
        return Tensor(rng.uniform(low, 1.0, size=shape), requires_grad=True)
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _project(out, rng):
    w = rng.standard_normal(out.shape) / np.sqrt(out.size)
    return (out * Tensor(w)).sum()


def _check(fn, leaves, seed, max_elements, max_leaves=None, step=STEP, eps=EPS):
    worst = 0.0
    if max_leaves is not None and len(leaves) > max_leaves:
        # always the first leaf (the input), plus a seeded sample of the rest
        pick = np.random.default_rng(seed).choice(len(leaves) - 1, max_leaves - 1, replace=False)
        leaves = [leaves[0]] + [leaves[1 + i] for i in sorted(pick)]
    for j, leaf in enumerate(leaves):
        err = ag.finite_diff_check(lambda _: fn(), leaf, step=step, eps=eps,
                                   max_elements=max_elements, seed=seed * 131 + j)
        worst = max(worst, err)
    return worst


def _module_case(make, inputs, call=None):
    """Case builder for a module: params and inputs are all checked leaves."""
    def build(rng):
        mod = make(rng)
        xs = [_leaf(rng, s) for s in inputs]
        run = call or (lambda m, *a: m(*a))
        proj = {}

        def fn():
            out = run(mod, *xs)
            if "w" not in proj:
                proj["w"] = Tensor(rng.standard_normal(out.shape) / np.sqrt(out.size))
            return (out * proj["w"]).sum()
        return fn, xs + list(mod.parameters())
    return build


def _fn_case(shapes, op, positive=()):
    """Case builder for a functional op over random leaves."""
    def build(rng):
        xs = [_leaf(rng, s, low=0.2) if i in positive else _leaf(rng, s)
              for i, s in enumerate(shapes)]
        w = {}

        def fn():
            out = op(*xs)
            if "w" not in w:
                w["w"] = Tensor(rng.standard_normal(out.shape) / np.sqrt(max(out.size, 1)))
            return (out * w["w"]).sum()
        return fn, xs
    return build


# ---------------------------------------------------------------------------
# case tables
# ---------------------------------------------------------------------------

def _layer_cases():
    s = (2, 3, 4, 4)
    return {
        "add_broadcast": _fn_case([s, (1, 3, 1, 1)], lambda a, b: a + b),
        "mul_div": _fn_case([s, s], lambda a, b: a * b / (b * b + 1.0)),
        "exp_log_sqrt": _fn_case([s], lambda a: ag.log(ag.exp(a) + ag.sqrt(a * a + 1.0))),
        "power_maximum": _fn_case([s], lambda a: ag.maximum(a, 0.05) ** 1.5, positive=(0,)),
        "sigmoid_relu_abs": _fn_case([s], lambda a: ag.sigmoid(a) * ag.relu(a + 0.3) + ag.tabs(a - 0.1)),
        "sum_mean": _fn_case([s], lambda a: a.sum(axis=(2, 3)) * a.mean(axis=1).sum()),
        "reshape_permute": _fn_case([s], lambda a: a.reshape(2, 12, 4).permute(2, 0, 1).transpose()),
        "getitem_concat": _fn_case([s, s], lambda a, b: ag.concat([a[:, 1:], b[:, ::2]], axis=1)),
        "matmul_batched": _fn_case([(2, 3, 4, 5), (5, 2)], ag.matmul),
        "softmax": _fn_case([(2, 3, 6)], lambda a: ag.softmax(a * 2.0, axis=-1)),
        "pad_unfold": _fn_case([s], lambda a: ag.unfold2d(ag.pad2d(a, 1), 3, 3, 1)),
        "linear": _fn_case([(2, 5, 4), (4, 3), (3,)], L.linear),
        "conv2d_strided": _fn_case([(2, 4, 6, 6), (6, 2, 3, 3), (6,)],
                                   lambda x, w, b: L.conv2d(x, w, b, stride=1, padding=1, groups=2)),
        "conv2d_stride2": _fn_case([(1, 3, 5, 5), (4, 3, 3, 3)],
                                   lambda x, w: L.conv2d(x, w, stride=2, padding=1)),
        "dwconv3x3": _fn_case([s, (3, 1, 3, 3), (3,)], L.dwconv3x3),
        "pwconv1x1": _fn_case([s, (5, 3, 1, 1), (5,)], L.pwconv1x1),
        "batchnorm_train": _module_case(lambda rng: L.BatchNorm2d(3), [s]),
        "layernorm": _module_case(lambda rng: L.LayerNorm(5), [(2, 4, 5)]),
        "upsample2x": _fn_case([(2, 2, 3, 4)], L.bilinear_upsample2x),
        "space_to_depth": _fn_case([(1, 2, 4, 4)], lambda x: L.space_to_depth(x, 2)),
        "patch_embed": _module_case(lambda rng: L.PatchEmbed(3, 4, 4, rng=rng), [(1, 3, 8, 8)]),
        "patch_merge": _module_case(lambda rng: L.PatchMerge(3, 5, rng=rng), [(2, 3, 4, 4)]),
        "avgpool": _fn_case([(1, 2, 4, 6)], lambda x: L.avgpool_to(x, 2, 3)),
        "conv_bn_relu": _module_case(lambda rng: L.ConvBNReLU(3, 4, 3, rng=rng), [(2, 3, 4, 4)]),
    }


def _encoder_cases():
    g = (2, 4, 4, 4)
    return {
        "cnn_block": _module_case(lambda rng: CNNBlock(4, rng), [g]),
        "sra_r1": _module_case(lambda rng: SRAttention(4, 2, 1, rng), [(2, 16, 4)],
                               call=lambda m, x: m(x, (4, 4))),
        "sra_r2": _module_case(lambda rng: SRAttention(4, 2, 2, rng), [(2, 16, 4)],
                               call=lambda m, x: m(x, (4, 4))),
        "lgff_combine": _fn_case([g, g, (2, 1, 4, 4)],
                                 lambda a, b, w: lgff_combine(a, b, ag.sigmoid(w))),
        "lgff": _module_case(lambda rng: LGFF(4, 2, rng), [g, g]),
        "udfe_block": _module_case(lambda rng: UDFEBlock(4, 2, 2, "full", 2, rng), [g]),
    }


def _decoder_cases():
    def udia_fn(m, e, t):
        return udia_aggregate(e, ag.sigmoid(t), m)
    return {
        "udia_layernorm": _module_case(lambda rng: UDIA(4, 1, "layer", rng), [(2, 8, 4), (2, 8, 1)],
                                       call=udia_fn),
        "udia_batchnorm_2h": _module_case(lambda rng: UDIA(4, 2, "batch", rng), [(2, 8, 4), (2, 8, 1)],
                                          call=udia_fn),
        "decode_stage": _module_case(lambda rng: DecodeStage(6, 3, True, rng), [(2, 4, 2, 2), (2, 2, 2, 2)]),
        "depth_head": _module_case(lambda rng: DepthHead(3, rng), [(2, 3, 2, 2)]),
    }


def _loss_inputs(rng, shape):
    pred = Tensor(rng.uniform(0.1, 1.0, size=shape), requires_grad=True)
    gt = rng.uniform(0.05, 1.0, size=shape)
    gt.flat[:3] = 0.0  # some invalid pixels
    return pred, gt


def _full_cases():
    enc = EncoderConfig(depths=[1, 1, 1, 1], channels=[4, 8, 8, 8])
    dec = DecoderConfig(channels=[8, 4, 4, 4])

    def loss_case(loss):
        def build(rng):
            pred, gt = _loss_inputs(rng, (2, 1, 4, 4))
            return (lambda: loss(pred, gt)), [pred]
        return build

    def model_case(guidance):
        def build(rng):
            model = UMono(enc, DecoderConfig(dec.channels, guidance=guidance), seed=int(rng.integers(1 << 30)))
            img = _leaf(rng, (2, 3, 64, 64), low=0.0)
            trans = rng.uniform(0.1, 1.0, size=(2, 1, 64, 64))
            gt = rng.uniform(0.05, 1.0, size=(2, 1, 64, 64))
            return (lambda: umono_loss(model(img, trans), gt)), [img] + list(model.parameters())
        return build

    return {
        "l2_loss": loss_case(l2_loss),
        "l1_loss": loss_case(lambda p, g: l2_loss(p, g, mode="l1")),
        "silog": loss_case(silog_loss),
        "umono_loss": loss_case(lambda p, g: umono_loss(p, g, cfg=LossConfig())),
        "tiny_model_loss": model_case("udia"),
    }


_TABLES = {"layer": _layer_cases, "encoder": _encoder_cases,
           "decoder": _decoder_cases, "full": _full_cases}
_TOL = {"layer": LAYER_TOL, "encoder": COMPOSITE_TOL, "decoder": COMPOSITE_TOL, "full": COMPOSITE_TOL}
# per-leaf coordinate budget: keeps the whole sweep to a couple of minutes on one core
_BUDGET = {"layer": 24, "encoder": 8, "decoder": 8, "full": 4}
_LEAF_BUDGET = {"full": 12}
_STEP = {"full": (COMPOSITE_STEPS, COMPOSITE_EPS)}


def run_case(name, build, scope="layer", trials=20, seed=0, tolerance=None, max_elements=None):
    start = time.perf_counter()
    worst = 0.0
    with ag.precision(64):
        for t in range(trials):
            rng = np.random.default_rng([seed, t, sum(name.encode())])
            fn, leaves = build(rng)
            worst = max(worst, _check(fn, leaves, t, max_elements or _BUDGET[scope],
                                      _LEAF_BUDGET.get(scope), *_STEP.get(scope, (STEP, EPS))))
    return GradCheckResult(name, scope, trials, worst, tolerance or _TOL[scope],
                           time.perf_counter() - start)


def run_suite(scope="all", trials=20, seed=0, only=None):
    """Run one scope (or ``"all"``); returns a list of :class:`GradCheckResult`."""
    scopes = SCOPES if scope == "all" else (scope,)
    results = []
    for sc in scopes:
        if sc not in _TABLES:
            raise ValueError(f"unknown gradcheck scope {sc!r}; choose from {SCOPES + ('all',)}")
        for name, build in _TABLES[sc]().items():
            if only is None or name in only:
                results.append(run_case(name, build, sc, trials, seed))
    return results
