"""Adam with decoupled weight decay, one-cycle schedule, gradient clipping."""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError


@dataclass
class AdamState:
    m: OrderedDict = field(default_factory=OrderedDict)
    v: OrderedDict = field(default_factory=OrderedDict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2

    @classmethod
    def for_params(cls, named_params, **hyper):
        state = cls(**hyper)
        for name, p in named_params:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def adam_step(named_params, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place on the parameter tensors.

    Weight decay is decoupled: ``theta -= lr * wd * theta`` happens before
    the moment update and does not pass through the adaptive scaling.
    """
    named_params = list(named_params)
    for name, p in named_params:
        if p.grad is None:
            raise KeyError(f"parameter {name!r} has no gradient")
        if name not in state.m:
            raise KeyError(f"parameter {name!r} is not registered with the optimizer")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for name, p in named_params:
        g = p.grad
        theta = p.data
        dtype = theta.dtype
        if state.weight_decay:
            theta = theta - dtype.type(lr * state.weight_decay) * theta
        m = dtype.type(b1) * state.m[name] + dtype.type(1 - b1) * g
        v = dtype.type(b2) * state.v[name] + dtype.type(1 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        mhat = m / dtype.type(c1)
        vhat = v / dtype.type(c2)
        p.data = (theta - dtype.type(lr) * mhat / (np.sqrt(vhat) + dtype.type(state.eps))).astype(dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    sq = 0.0
    for p in params:
        if p.grad is not None:
            sq += float(np.square(p.grad, dtype=np.float64).sum())
    total = math.sqrt(sq)
    if not math.isfinite(total):
        raise NumericalError("gradient norm is not finite")
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return total


@dataclass
class OneCycleSchedule:
    max_lr: float = 1e-4
    total_steps: int = 1000
    warmup: float = 0.3
    start_div: float = 25.0
    floor_div: float = 100.0
    anneal: str = "cos"  # "cos" | "poly"
    poly_power: float = 0.9

    @property
    def start_lr(self):
        return self.max_lr / self.start_div

    @property
    def floor_lr(self):
        return self.max_lr / self.floor_div

    @property
    def warmup_end(self):
        return self.warmup * self.total_steps


def one_cycle_lr(step: float, sched: OneCycleSchedule) -> float:
    """Cosine ramp ``start -> max`` over the warmup, then decay ``max -> floor``."""
    if not 0 <= step <= sched.total_steps:
        raise ValueError(f"step {step} outside [0, {sched.total_steps}]")
    peak = sched.warmup_end
    hi = sched.max_lr
    if step <= peak and peak > 0:
        lo = sched.start_lr
        return lo + (hi - lo) * (1 - math.cos(math.pi * step / peak)) / 2
    lo = sched.floor_lr
    span = sched.total_steps - peak
    frac = (step - peak) / span if span > 0 else 1.0
    if sched.anneal == "poly":
        return lo + (hi - lo) * (1 - frac) ** sched.poly_power
    return lo + (hi - lo) * (1 + math.cos(math.pi * frac)) / 2
