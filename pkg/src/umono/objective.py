"""Training losses and depth evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ShapeError

DEPTH_EPS = 1e-3
DELTA_BASE = 1.25
METRIC_KEYS = ("delta1", "delta2", "delta3", "abs_rel", "sq_rel", "rmse", "log10")


@dataclass
class LossConfig:
    lam: float = 0.2
    mu: float = 0.8
    alpha: float = 10.0
    beta: float = 0.85
    l2_mode: str = "mse"  # "mse" | "l1"

    def validate(self):
        if self.lam < 0 or self.mu < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 <= self.beta <= 1:
            raise ValueError(f"silog beta must lie in [0, 1], got {self.beta}")
        if self.l2_mode not in ("mse", "l1"):
            raise ValueError(f"unknown l2 mode {self.l2_mode!r}")
        return self


def valid_mask(gt, eps=DEPTH_EPS):
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    return gt > eps


def _prepare(pred, gt, mask):
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    gt = gt.data if isinstance(gt, Tensor) else np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = valid_mask(gt) if mask is None else np.asarray(mask, dtype=bool)
    count = int(mask.sum())
    if count == 0:
        raise ValueError("empty valid-pixel mask")
    return pred, gt.astype(pred.dtype), mask, count


def l2_loss(pred, gt, mask=None, mode="mse"):
    """Mean squared (or absolute, ``mode='l1'``) error over valid pixels."""
    pred, gt, mask, count = _prepare(pred, gt, mask)
    diff = (pred - gt) * mask.astype(pred.dtype)
    per = diff * diff if mode == "mse" else ag.tabs(diff)
    return per.sum() * (1.0 / count)


def silog_loss(pred, gt, mask=None, alpha=10.0, beta=0.85):
    """``alpha * sqrt(mean(g^2) - beta * mean(g)^2)``, ``g = log pred - log gt`` on the mask."""
    pred, gt, mask, count = _prepare(pred, gt, mask)
    if (pred.data[mask] <= 0).any() or (gt[mask] <= 0).any():
        raise ValueError("silog needs strictly positive depths on the valid mask")
    m = mask.astype(pred.dtype)
    # masked-out pixels are routed to log(1) = 0 so they never produce -inf
    safe_pred = pred * m + (1.0 - m)
    safe_gt = np.where(mask, gt, 1).astype(pred.dtype)
    g = (ag.log(safe_pred) - np.log(safe_gt)) * m
    mean_sq = (g * g).sum() * (1.0 / count)
    mean_g = g.sum() * (1.0 / count)
    radicand = ag.maximum(mean_sq - beta * (mean_g * mean_g), 0.0)
    return alpha * ag.sqrt(radicand)


def umono_loss(pred, gt, mask=None, cfg: LossConfig | None = None):
    """``lam * L2 + mu * SILog``."""
    cfg = cfg or LossConfig()
    return (cfg.lam * l2_loss(pred, gt, mask, cfg.l2_mode)
            + cfg.mu * silog_loss(pred, gt, mask, cfg.alpha, cfg.beta))


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    delta1: float
    delta2: float
    delta3: float
    abs_rel: float
    sq_rel: float
    rmse: float
    log10: float
    n: int

    def to_text(self) -> str:
        """One ``key=value`` per line in table column order, then the pixel count."""
        lines = [f"{k}={getattr(self, k):.6f}" for k in METRIC_KEYS]
        lines.append(f"n={self.n}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        vals = {}
        for line in text.strip().splitlines():
            key, _, val = line.partition("=")
            vals[key.strip()] = val.strip()
        return cls(**{k: float(vals[k]) for k in METRIC_KEYS}, n=int(vals["n"]))

    def as_dict(self):
        return asdict(self)


class MetricAccumulator:
    """Pixel-weighted running sums, so a split can be scored image by image."""

    def __init__(self, convention="gt"):
        if convention not in ("gt", "pred"):
            raise ValueError(f"denominator convention must be 'gt' or 'pred', got {convention!r}")
        self.convention = convention
        self.n = 0
        self.sums = dict.fromkeys(("d1", "d2", "d3", "abs_rel", "sq_rel", "sq", "log10"), 0.0)

    def update(self, pred, gt, mask=None):
        pred = np.asarray(pred.data if isinstance(pred, Tensor) else pred, dtype=np.float64)
        gt = np.asarray(gt.data if isinstance(gt, Tensor) else gt, dtype=np.float64)
        if pred.shape != gt.shape:
            raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
        mask = valid_mask(gt) if mask is None else np.asarray(mask, dtype=bool)
        p, g = pred[mask], gt[mask]
        if (p <= 0).any() or (g <= 0).any():
            raise ValueError("metrics need strictly positive depths on the valid mask")
        diff = p - g
        denom = g if self.convention == "gt" else p
        ratio = np.maximum(p / g, g / p)
        s = self.sums
        s["d1"] += float((ratio < DELTA_BASE).sum())
        s["d2"] += float((ratio < DELTA_BASE ** 2).sum())
        s["d3"] += float((ratio < DELTA_BASE ** 3).sum())
        s["abs_rel"] += float((np.abs(diff) / denom).sum())
        s["sq_rel"] += float((diff * diff / denom).sum())
        s["sq"] += float((diff * diff).sum())
        s["log10"] += float(np.abs(np.log10(p) - np.log10(g)).sum())
        self.n += int(p.size)

    def report(self) -> MetricsReport:
        if self.n == 0:
            raise ValueError("no valid pixels were accumulated")
        s, n = self.sums, self.n
        return MetricsReport(
            delta1=s["d1"] / n, delta2=s["d2"] / n, delta3=s["d3"] / n,
            abs_rel=s["abs_rel"] / n, sq_rel=s["sq_rel"] / n,
            rmse=math.sqrt(s["sq"] / n), log10=s["log10"] / n, n=n)


def compute_metrics(pred, gt, mask=None, convention="gt") -> MetricsReport:
    """Seven standard depth metrics over the valid pixels.

    ``convention`` picks the Abs/Sq Rel denominator: ``"gt"`` (ground
    truth, the usual choice) or ``"pred"`` (predicted depth).
    """
    acc = MetricAccumulator(convention)
    acc.update(pred, gt, mask)
    return acc.report()
