"""Seeded training loop, evaluation and checkpoint lifecycle."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import RunConfig
from .data.checkpoint import load_checkpoint, save_checkpoint
from .data.dataset import batch_arrays
from .errors import NumericalError
from .model import UMono
from .objective import DEPTH_EPS, MetricAccumulator, MetricsReport, umono_loss
from .optim import AdamState, OneCycleSchedule, adam_step, clip_grad_norm, one_cycle_lr

logger = logging.getLogger(__name__)

LOG_NAME = "train.log"
WINDOW = 50


@dataclass
class TrainReport:
    epoch_losses: list = field(default_factory=list)
    step_losses: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    wall_time: float = 0.0
    steps: int = 0
    flagged_windows: list = field(default_factory=list)
    final_metrics: MetricsReport | None = None
    last_checkpoint: str | None = None


def build_model(cfg: RunConfig) -> UMono:
    with ag.precision(cfg.train.precision):
        return UMono(cfg.encoder, cfg.decoder, seed=cfg.train.seed)


def make_schedule(cfg: RunConfig, total_steps: int) -> OneCycleSchedule:
    s = cfg.schedule
    return OneCycleSchedule(max_lr=cfg.optim.lr, total_steps=total_steps, warmup=s.warmup,
                            start_div=s.start_div, floor_div=s.floor_div,
                            anneal=s.anneal, poly_power=s.poly_power)


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Shuffle for ``epoch``; a pure function of (seed, epoch) so resumes replay it."""
    return np.random.default_rng([seed, 0x5EED, epoch]).permutation(n)


def flag_windows(losses, window=WINDOW):
    """Indices of consecutive ``window``-step blocks whose mean loss rose."""
    means = [float(np.mean(losses[i:i + window]))
             for i in range(0, len(losses) - window + 1, window)]
    return [i for i in range(1, len(means)) if means[i] > means[i - 1]]


def _fmt(x: float) -> str:
    return repr(float(x))


def checkpoint_state(model, adam, cfg, epoch_acc=()):
    # the partial-epoch losses travel with the checkpoint so a mid-epoch
    # resume logs the same epoch mean as an uninterrupted run
    meta = {"config": cfg.to_text(), "epoch_acc": np.asarray(epoch_acc, dtype=np.float64)}
    return model.state_dict(), adam, meta


def restore(model: UMono, path):
    params, adam, meta = load_checkpoint(path)
    model.load_state_dict(params)
    return adam, meta


def train(dataset, cfg: RunConfig, seed: int | None = None, out_dir=None, resume=None,
          stop_after: int | None = None, eval_set=None):
    """Train a fresh (or resumed) model on ``dataset`` (a list of samples).

    ``stop_after`` halts after that many total optimizer steps (checkpoint
    written), which together with ``resume`` lets a run be split in two.
    Returns ``(model, TrainReport)``.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if seed is not None:
        cfg.train.seed = seed
    cfg.validate()
    h, w = dataset[0].rgb.shape[1:]
    if h % 32 or w % 32:
        raise ValueError(f"training images must have extents divisible by 32, got {h}x{w}")
    out = Path(out_dir or cfg.out.dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / LOG_NAME

    model = build_model(cfg)
    named = list(model.named_parameters())
    o = cfg.optim
    adam = AdamState.for_params(named, beta1=o.beta1, beta2=o.beta2, eps=o.eps,
                                weight_decay=o.weight_decay)
    epoch_acc = []
    if resume is not None:
        loaded, meta = restore(model, resume)
        if loaded is None:
            raise ValueError(f"{resume} holds no optimizer state; cannot resume")
        adam = loaded
        epoch_acc = [float(v) for v in meta.get("epoch_acc", ())]
        named = list(model.named_parameters())

    n = len(dataset)
    bs = cfg.train.batch_size
    per_epoch = math.ceil(n / bs)
    total = cfg.train.steps or cfg.train.epochs * per_epoch
    sched = make_schedule(cfg, max(total, 1))
    dtype = np.float64 if cfg.train.precision == 64 else np.float32

    report = TrainReport()
    start = time.perf_counter()
    step = adam.step
    if step == 0:
        log_path.write_text("")
    last_good = resume
    with ag.precision(cfg.train.precision):
        model.train()
        while step < total and (stop_after is None or step < stop_after):
            epoch, b = divmod(step, per_epoch)
            order = epoch_order(cfg.train.seed, epoch, n)
            batch = [dataset[i] for i in order[b * bs:(b + 1) * bs]]
            rgb, trans, depth = batch_arrays(batch, dtype)
            lr = one_cycle_lr(step, sched)

            pred = model(Tensor(rgb), trans)
            loss = umono_loss(pred, depth, cfg=cfg.loss)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss at step {step} (epoch {epoch}); "
                                     f"last good checkpoint: {last_good}")
            model.zero_grad()
            ag.backward(loss)
            gnorm = clip_grad_norm([p for _, p in named], o.clip_norm)
            adam_step(named, adam, lr)
            step += 1

            report.step_losses.append(value)
            report.lr_trace.append(lr)
            report.grad_norms.append(gnorm)
            epoch_acc.append(value)

            epoch_done = step % per_epoch == 0
            extra = cfg.train.ckpt_every and step % cfg.train.ckpt_every == 0
            halting = stop_after is not None and step == stop_after
            if epoch_done:
                mean_loss = float(np.mean(epoch_acc))
                report.epoch_losses.append(mean_loss)
                with open(log_path, "a") as fh:
                    fh.write(f"epoch={epoch + 1} step={step} loss={_fmt(mean_loss)} lr={_fmt(lr)}\n")
                epoch_acc = []
            if epoch_done or extra or halting or step == total:
                ckpt = out / (f"epoch{epoch + 1:04d}.umck" if epoch_done else f"step{step:07d}.umck")
                save_checkpoint(ckpt, *checkpoint_state(model, adam, cfg, epoch_acc))
                save_checkpoint(out / "last.umck", *checkpoint_state(model, adam, cfg, epoch_acc))
                last_good = str(ckpt)
                report.last_checkpoint = last_good

    report.steps = step
    report.wall_time = time.perf_counter() - start
    report.flagged_windows = flag_windows(report.step_losses)
    if report.flagged_windows:
        logger.warning("loss rose in %d window(s) of %d steps", len(report.flagged_windows), WINDOW)
    if step >= total:
        report.final_metrics = evaluate(model, eval_set if eval_set is not None else dataset, cfg)
        with open(log_path, "a") as fh:
            for line in report.final_metrics.to_text().splitlines():
                fh.write(f"final.{line}\n")
    return model, report


def predict(model: UMono, rgb, trans, precision=32):
    dtype = np.float64 if precision == 64 else np.float32
    with ag.no_grad(), ag.precision(precision):
        return model(Tensor(np.asarray(rgb, dtype=dtype)), np.asarray(trans, dtype=dtype)).data


def evaluate(model: UMono, dataset, cfg: RunConfig | None = None, batch_size=None,
             predict_fn=None) -> MetricsReport:
    """Eval-mode metrics over ``dataset``, pixel-weighted across images.

    Predictions are clamped to ``[DEPTH_EPS, 1]`` before scoring.
    ``predict_fn(samples) -> [B, 1, H, W]`` overrides the network (test hook).
    """
    if not dataset:
        raise ValueError("cannot evaluate an empty split")
    cfg = cfg or RunConfig()
    bs = batch_size or cfg.train.batch_size
    acc = MetricAccumulator(cfg.eval.convention)
    was_training = model.training if model is not None else False
    if model is not None:
        model.eval()
    try:
        for i in range(0, len(dataset), bs):
            chunk = dataset[i:i + bs]
            rgb, trans, depth = batch_arrays(chunk, np.float64)
            if predict_fn is not None:
                pred = np.asarray(predict_fn(chunk), dtype=np.float64)
            else:
                pred = predict(model, rgb, trans, cfg.train.precision).astype(np.float64)
            acc.update(np.clip(pred, DEPTH_EPS, 1.0), depth)
    finally:
        if model is not None:
            model.train(was_training)
    return acc.report()
