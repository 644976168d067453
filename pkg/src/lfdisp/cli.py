"""Command-line entry point: ``lfdisp {gen,train,infer,eval,epi,inspect}``.

Exit status is 0 on success, 1 for usage errors and 2 for runtime failures
(I/O problems, malformed inputs, aborted training).
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from .autodiff.serialize import ContainerError
from .lightfield import ViewPattern, extract_epi, load_lightfield, load_scene, read_grid_hint, \
    stack_sais, write_png
from .losses import reports_to_csv
from .model import load_model, param_count, receptive_field
from .pfm import PFMError, write_pfm
from .synth import gen_corpus
from .training import TrainConfig, TrainingAborted, evaluate, load_dataset, load_samples, \
    predict, train


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lfdisp", description="Light-field disparity estimation toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="render a synthetic scene corpus")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--size", type=int, default=48, help="image side in pixels (default 48)")
    p.add_argument("--views", type=int, default=9, help="views per grid side (default 9)")

    p = sub.add_parser("train", help="train a model on a scene corpus")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--config", required=True, type=Path, help="key=value training config")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--variant", type=int, choices=(9, 25, 81))
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("infer", help="predict disparity for one scene")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output PFM path")
    p.add_argument("--png", type=Path, help="optional normalized grayscale preview")

    p = sub.add_parser("eval", help="score a checkpoint on every scene under a directory")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="output CSV path")
    p.add_argument("--no-timing", action="store_true", help="write 0 in the seconds column")

    p = sub.add_parser("epi", help="write a horizontal epipolar plane image")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--row", required=True, type=int, help="pixel row")
    p.add_argument("--view-row", required=True, type=int, help="view grid row")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("inspect", help="describe a checkpoint")
    p.add_argument("--ckpt", required=True, type=Path)
    return parser


def _gen(args) -> int:
    if args.count < 2:
        raise UsageError("--count must be at least 2")
    if args.size < 1 or args.views < 1 or args.views % 2 == 0:
        raise UsageError("--size must be positive and --views a positive odd number")
    paths = gen_corpus(args.out, args.count, args.seed, size=args.size, views=args.views)
    print(f"wrote {len(paths)} scenes to {args.out}")
    return 0


def _train(args) -> int:
    config = TrainConfig.from_file(args.config)
    if args.variant is not None:
        config = replace(config, variant=args.variant)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    dataset = load_dataset(args.data, config)

    def report(entry):
        val = "-" if entry.val_mse_x100 is None else f"{entry.val_mse_x100:.4f}"
        print(f"epoch {entry.epoch:4d}  lr {entry.lr:.3g}  loss {entry.train_loss:.5f}  "
              f"val_mse_x100 {val}", flush=True)

    result = train(None, dataset, config, out_dir=args.out, resume=args.resume, progress=report)
    print(f"best epoch: {result.best_epoch}")
    return 0


def _scene_stack(scene_dir: Path, variant: int) -> np.ndarray:
    scene = load_scene(scene_dir, read_grid_hint(scene_dir))
    return stack_sais(scene.lightfield, ViewPattern.for_variant(variant))[0]


def _infer(args) -> int:
    model = load_model(args.ckpt)
    stack = _scene_stack(args.scene, model.config.variant)
    pred = predict(model, stack)
    write_pfm(args.out, pred)
    lo, hi = float(pred.min()), float(pred.max())
    print(f"disparity range: [{lo:.6f}, {hi:.6f}]")
    if args.png is not None:
        norm = (pred - lo) / (hi - lo) if hi > lo else np.zeros_like(pred)
        write_png(args.png, norm)
    return 0


def _eval(args) -> int:
    model = load_model(args.ckpt)
    samples = load_samples(args.data, model.config.variant)
    reports, mean = evaluate(model, samples, record_timing=not args.no_timing)
    args.out.write_text(reports_to_csv(reports + [mean]))
    for r in reports + [mean]:
        print(r.text())
    return 0


def _epi(args) -> int:
    lf = load_lightfield(args.scene, read_grid_hint(args.scene))
    try:
        epi = extract_epi(lf, "horizontal", args.row, args.view_row)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    write_png(args.out, epi)
    print(f"wrote {epi.shape[0]}x{epi.shape[1]} EPI to {args.out}")
    return 0


def _inspect(args) -> int:
    model = load_model(args.ckpt)
    print(model.config.to_text(), end="")
    n = param_count(model)
    print(f"params: {n} ({n / 1e6:.2f}M)")
    print(f"receptive_field: {receptive_field(model.config.pyramid)}")
    return 0


COMMANDS = {"gen": _gen, "train": _train, "infer": _infer, "eval": _eval, "epi": _epi,
            "inspect": _inspect}


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lfdisp {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, ContainerError, PFMError, TrainingAborted) as exc:
        print(f"lfdisp {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
