"""Command line entry point: ``tstdepth <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data or format error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_checkpoint
from .data import load_dataset, read_raw_f32, read_sample, write_depth_pgm
from .errors import FormatError, TSTError, UsageError
from .loss_metrics import EvalProtocol, metrics_csv
from .model import TSTModel, build_model
from .profiler import benchmark_fps, count_macs, parse_shape
from .tensor import Tensor, no_grad
from .train import TrainConfig, evaluate, pad_to_multiple, train

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_data(source: str):
    if source.startswith("synth") or Path(source).is_dir():
        return load_dataset(source)
    return [read_sample(source)]


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config)
    if args.out_dir:
        cfg = dataclasses.replace(cfg, out_dir=args.out_dir)
    result = train(cfg, resume=args.resume)
    last = result.history[-1] if result.history else {}
    print(f"trained {cfg.variant} for {last.get('epoch', 0)} epochs; final loss {last.get('train_loss', float('nan')):.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.build_model()
    protocol = EvalProtocol(crop=args.crop, max_depth=args.max_depth or model.config.max_depth)
    metrics = evaluate(model, _load_data(args.data), protocol)
    text = metrics_csv([(model.config.variant, metrics)])
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_profile(args) -> int:
    h, w = parse_shape(args.shape)
    report = count_macs(build_model(args.variant), (1, 3, h, w))
    sys.stdout.write(report.to_csv() if args.csv else report.to_table(args.depth) + "\n")
    return 0


def cmd_bench(args) -> int:
    h, w = parse_shape(args.shape)
    model = build_model(args.variant)
    report = benchmark_fps(model, (1, 3, h, w), warmup=args.warmup, iters=args.iters)
    sys.stdout.write(report.to_csv() if args.csv else report.to_table() + "\n")
    return 0


def _read_image(path: str) -> np.ndarray:
    img = read_raw_f32(path)
    if img.ndim == 4 and img.shape[0] == 1:
        img = img[0]
    if img.ndim == 3 and img.shape[0] != 3 and img.shape[-1] == 3:
        img = img.transpose(2, 0, 1)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"{path}: expected a 3 x H x W image, got shape {img.shape}")
    return img


def cmd_predict(args) -> int:
    model: TSTModel = load_checkpoint(args.ckpt).build_model()
    model.eval()
    img = _read_image(args.image)
    h, w = img.shape[1:]
    with no_grad():
        pred = model(Tensor(pad_to_multiple(img[None], 32))).data[0, 0, :h, :w]
    write_depth_pgm(args.out, pred)
    print(f"wrote {args.out} ({h}x{w}, depth {pred.min():.3f}..{pred.max():.3f} m)")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    return 0 if run_selftest() else 3


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tstdepth", description="Token-sharing transformer depth estimation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train from a key = value config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out-dir", help="override out_dir from the config")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="directory, sample stem, or synth:count=..,seed=..,size=HxW")
    e.add_argument("--crop", choices=("none", "eigen"), default="none")
    e.add_argument("--max-depth", type=float)
    e.add_argument("--out", help="also write the metrics CSV here")
    e.set_defaults(func=cmd_eval)

    for name, func in (("profile", cmd_profile), ("bench", cmd_bench)):
        s = sub.add_parser(name, help="parameter/MAC table" if name == "profile" else "FPS benchmark")
        s.add_argument("--variant", choices=("tst", "tst-s"), default="tst")
        s.add_argument("--shape", default="480x640", help="HxW")
        s.add_argument("--csv", action="store_true")
        if name == "profile":
            s.add_argument("--depth", type=int, default=None, help="collapse rows below this name depth")
        else:
            s.add_argument("--iters", type=int, default=200)
            s.add_argument("--warmup", type=int, default=20)
        s.set_defaults(func=func)

    pr = sub.add_parser("predict", help="depth map for one raw f32 image")
    pr.add_argument("--ckpt", required=True)
    pr.add_argument("--image", required=True)
    pr.add_argument("--out", required=True)
    pr.set_defaults(func=cmd_predict)

    st = sub.add_parser("selftest", help="gradient and oracle checks")
    st.set_defaults(func=cmd_selftest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except TSTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
