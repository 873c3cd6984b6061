"""Command-line entry point: ``stvsr train | infer | eval | selfcheck``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, load_config
from .data import CLIP_LENGTH, IngestionError, load_frames, save_frames, synthesize_toy_clip
from .metrics import psnr, ssim
from .network import ABLATIONS, ModelConfig, ZoomingModel, forward
from .selfcheck import CHECKS, run_checks
from .train import (
    CheckpointError,
    NonFiniteLossError,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train_loop,
    write_loss_log,
)

logger = logging.getLogger("stvsr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stvsr", description="One-stage space-time video super-resolution (x4 space, x2 time).")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    tr = sub.add_parser("train", help="train a model")
    tr.add_argument("--config", help="key = value config file (defaults: desk model, standard optimiser settings)")
    tr.add_argument("--data", help="directory of clip subdirectories, 7 PNG frames each")
    tr.add_argument("--synthetic", type=int, metavar="N", help="train on N synthetic shift clips instead")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--log", help="loss log path (default: <out>.log)")
    tr.add_argument("--ablation", choices=sorted(ABLATIONS), help="ablation variant (a)-(e)")

    inf = sub.add_parser("infer", help="super-resolve a frame directory")
    inf.add_argument("--ckpt", required=True)
    inf.add_argument("--in", dest="input", required=True)
    inf.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="PSNR/SSIM table for two frame directories")
    ev.add_argument("--pred", required=True)
    ev.add_argument("--gt", required=True)
    ev.add_argument("--y-channel", action="store_true", help="compare BT.601 luma only")

    sc = sub.add_parser("selfcheck", help="run invariant and gradient checks")
    sc.add_argument("--inject-fault", help=argparse.SUPPRESS)
    return parser


def _load_clips(root: Path) -> list[np.ndarray]:
    if not root.is_dir():
        raise IngestionError(f"{root}: not a directory")
    clips = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        clip = load_frames(sub)
        if len(clip) != CLIP_LENGTH:
            raise IngestionError(f"{sub}: expected {CLIP_LENGTH} frames, found {len(clip)}")
        clips.append(clip)
    if not clips:
        raise IngestionError(f"{root}: no clip subdirectories")
    return clips


def cmd_train(args) -> int:
    if args.data is None and args.synthetic is None:
        raise UsageError("train needs --data DIR or --synthetic N")
    if args.config:
        model_cfg, train_cfg = load_config(args.config)
    else:
        model_cfg, train_cfg = ModelConfig.desk(), TrainConfig()
    if args.ablation:
        model_cfg = model_cfg.with_ablation(args.ablation)
    if args.synthetic is not None:
        if args.synthetic < 1:
            raise UsageError("--synthetic needs a positive clip count")
        size = max(16, 8 * train_cfg.patch)
        clips = [
            synthesize_toy_clip("shift", size, rng=np.random.default_rng((train_cfg.seed, i)))
            for i in range(args.synthetic)
        ]
    else:
        clips = _load_clips(Path(args.data))
    model = ZoomingModel(model_cfg)
    logger.info("training %s (%d parameters) for %d steps", model_cfg, model.num_parameters(), train_cfg.total_steps)
    every = max(1, train_cfg.total_steps // 20)
    result = train_loop(
        model,
        clips,
        train_cfg,
        on_step=lambda s, lr, loss: logger.info("step %d lr %.3g loss %.5f", s, lr, loss) if s % every == 0 else None,
    )
    save_checkpoint(result.model, args.out)
    write_loss_log(result.log, args.log or f"{args.out}.log")
    print(f"saved {args.out} (final loss {result.log[-1][2]:.5f})")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.ckpt)
    frames = load_frames(args.input)
    if len(frames) < 2:
        raise IngestionError(f"{args.input}: need at least 2 frames, found {len(frames)}")
    with T.no_grad():
        out = forward(list(frames), model)
    paths = save_frames([o.data for o in out], args.out)
    print(f"wrote {len(paths)} frames to {args.out}")
    return 0


def cmd_eval(args) -> int:
    pred = load_frames(args.pred)
    gt = load_frames(args.gt)
    if len(pred) != len(gt):
        raise IngestionError(f"frame count mismatch: {len(pred)} predicted vs {len(gt)} ground truth")
    if pred.shape != gt.shape:
        raise IngestionError(f"frame size mismatch: {pred.shape[2:]} vs {gt.shape[2:]}")
    names = sorted(p.name for p in Path(args.pred).iterdir() if p.suffix.lower() == ".png")
    print("frame\tpsnr\tssim")
    scores = []
    for name, a, b in zip(names, pred, gt):
        row = (psnr(a, b, args.y_channel), ssim(a, b, args.y_channel))
        scores.append(row)
        print(f"{name}\t{row[0]:.2f}\t{row[1]:.4f}")
    mean = np.mean(scores, axis=0)
    print(f"mean\t{mean[0]:.2f}\t{mean[1]:.4f}")
    return 0


def cmd_selfcheck(args) -> int:
    if args.inject_fault:
        with T.inject_fault(args.inject_fault):
            ok = run_checks(CHECKS)
    else:
        ok = run_checks(CHECKS)
    print("all checks passed" if ok else "some checks FAILED")
    return 0 if ok else 1


COMMANDS = {"train": cmd_train, "infer": cmd_infer, "eval": cmd_eval, "selfcheck": cmd_selfcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, IngestionError, CheckpointError, T.ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
