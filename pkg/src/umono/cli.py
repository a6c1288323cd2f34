"""``umono`` command line: synth, train, eval, infer, gradcheck.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.  Failures print a one-line reason on stderr.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import parse_config
from .errors import ConfigError, FormatError, NumericalError, ShapeError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _size(text):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _triple(text):
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(vals)


def cmd_synth(args):
    from .data.dataset import write_synthetic_dataset
    from .physics import FormationParams

    d = FormationParams()
    params = FormationParams(beta=args.beta or d.beta, ambient=args.ambient or d.ambient)
    h, w = args.size
    manifest = write_synthetic_dataset(args.out, args.count, h, w, args.seed, params)
    print(manifest)
    return EXIT_OK


def _load_cfg(args):
    overrides = {}
    for kv in args.set or []:
        if "=" not in kv:
            raise ConfigError(f"--set expects KEY=VALUE, got {kv!r}")
        key, _, value = kv.partition("=")
        overrides[key.strip()] = value.strip()
    cfg = parse_config(_read_text(args.config), overrides)
    # manifest paths in a config file are relative to that file
    base = Path(args.config).parent
    for key in ("train_manifest", "eval_manifest"):
        value = getattr(cfg.data, key)
        if value and not Path(value).is_absolute():
            setattr(cfg.data, key, str(base / value))
    return cfg


def _read_text(path):
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def cmd_train(args):
    from .data.dataset import load_dataset
    from .trainer import train

    cfg = _load_cfg(args)
    if not cfg.data.train_manifest:
        raise ConfigError("data.train_manifest is not set")
    train_set = load_dataset(cfg.data.train_manifest, radius=cfg.data.patch_radius)
    eval_set = (load_dataset(cfg.data.eval_manifest, radius=cfg.data.patch_radius)
                if cfg.data.eval_manifest else None)
    _, report = train(train_set, cfg, out_dir=args.out, resume=args.resume, eval_set=eval_set)
    if report.final_metrics is not None:
        print(report.final_metrics.to_text(), end="")
    print(f"checkpoint={report.last_checkpoint}")
    return EXIT_OK


def _model_from_ckpt(path, cfg=None):
    from .data.checkpoint import load_checkpoint
    from .model import UMono

    params, _, meta = load_checkpoint(path)
    if cfg is None:
        if "config" not in meta:
            raise ConfigError(f"{path} carries no config; pass --config")
        cfg = parse_config(meta["config"])
    from . import autograd as ag
    with ag.precision(cfg.train.precision):
        model = UMono(cfg.encoder, cfg.decoder, seed=cfg.train.seed)
    model.load_state_dict(params)
    model.eval()
    return model, cfg


def cmd_eval(args):
    from .data.dataset import load_dataset
    from .trainer import evaluate

    cfg = _load_cfg(args) if args.config else None
    model, cfg = _model_from_ckpt(args.ckpt, cfg)
    data = args.data or cfg.data.eval_manifest
    if not data:
        raise ConfigError("no evaluation manifest: pass --data or set data.eval_manifest")
    dataset = load_dataset(data, radius=cfg.data.patch_radius)
    print(evaluate(model, dataset, cfg).to_text(), end="")
    return EXIT_OK


def cmd_infer(args):
    from .data.dataset import compute_transmission, export_depth_visual
    from .data.netpbm import read_pgm, read_ppm
    from .trainer import predict

    model, cfg = _model_from_ckpt(args.ckpt)
    rgb = read_ppm(args.rgb)
    if args.transmission:
        trans = read_pgm(args.transmission)
        if trans.shape[1:] != rgb.shape[1:]:
            raise ShapeError(f"transmission {trans.shape[1:]} and image {rgb.shape[1:]} extents differ")
    else:
        trans = compute_transmission(rgb, cfg.data.patch_radius)
    depth = predict(model, rgb[None], trans[None], cfg.train.precision)[0]
    out = str(args.out)
    for suffix in (".depth.pgm", ".pgm"):
        if out.endswith(suffix):
            out = out[: -len(suffix)]
            break
    for p in export_depth_visual(np.clip(depth, 0.0, 1.0), out):
        print(p)
    return EXIT_OK


def cmd_gradcheck(args):
    from . import autograd as ag
    from .gradcheck import run_suite

    if args.precision != 64:
        raise ConfigError("gradient checks run at 64-bit only (--precision 64)")
    with ag.precision(64):
        results = run_suite(args.scope, trials=args.trials, seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise NumericalError(f"gradient check failed for: {', '.join(failed)}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="umono", description="Underwater monocular depth estimation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic underwater RGB-D dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=8)
    s.add_argument("--size", type=_size, default=(64, 64), help="HxW, multiples of 32")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--beta", type=_triple, default=None, help="attenuation r,g,b")
    s.add_argument("--ambient", type=_triple, default=None, help="ambient light r,g,b")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", default=None, help="checkpoint to continue from")
    t.add_argument("--out", default=None, help="output directory (default: out.dir)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--config", default=None, help="default: config stored in the checkpoint")
    e.add_argument("--data", default=None, help="manifest (default: data.eval_manifest)")
    e.add_argument("--set", action="append", metavar="KEY=VALUE")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="predict a depth map for one image")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--rgb", required=True)
    i.add_argument("--out", required=True, help="output prefix; writes <prefix>.depth.pgm")
    i.add_argument("--transmission", default=None, help="precomputed transmission PGM")
    i.set_defaults(func=cmd_infer)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", choices=("layer", "encoder", "decoder", "full", "all"), default="all")
    g.add_argument("--precision", type=int, default=64)
    g.add_argument("--trials", type=int, default=20)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        code, msg = EXIT_CONFIG, f"config error: {exc}"
    except (FormatError, ShapeError, FileNotFoundError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    except NumericalError as exc:
        code, msg = EXIT_NUMERIC, f"numerical failure: {exc}"
    except (OSError, ValueError) as exc:
        code, msg = EXIT_DATA, f"data error: {exc}"
    print(f"umono: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
