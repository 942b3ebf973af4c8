"""Command line entry point: ``bussam {synth,split,train,eval,gradcheck}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from bussam.errors import BussamError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3

log = logging.getLogger("bussam")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _cmd_synth(args) -> int:
    from bussam.data import synth_dataset

    if args.count < 1:
        raise BussamError(f"--count must be >= 1, got {args.count}")
    if args.size < 8:
        raise BussamError(f"--size must be >= 8, got {args.size}")
    ids = synth_dataset(args.count, args.size, args.seed, args.out)
    print(f"wrote {len(ids)} samples to {args.out}")
    return EXIT_OK


def _cmd_split(args) -> int:
    from bussam.data import read_labels, split_dataset, write_manifest

    train, test = split_dataset(read_labels(args.dir), seed=args.seed)
    path = write_manifest(args.dir, train, test)
    print(f"{path}: {len(train)} train, {len(test)} test")
    return EXIT_OK


def _cmd_train(args) -> int:
    from bussam.config import load_config
    from bussam.train import train

    cfg = load_config(args.config)

    def report(epoch: int, loss: float, dice: float) -> None:
        print(f"epoch {epoch:3d}  loss {loss:.5f}  val_dice {dice:.2f}", flush=True)

    res = train(cfg, args.data, ckpt_out=args.out, log_csv=args.log, on_epoch=report)
    print(f"saved {args.out} ({res.seconds:.1f}s)")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from bussam.train import evaluate

    mean = evaluate(args.ckpt, args.data, csv_out=args.csv, save_masks=args.save_masks).mean()
    print(
        f"Acc {mean.acc:.2f}  Se {mean.se:.2f}  Dice {mean.dice:.2f}  "
        f"IoU {mean.iou:.2f}  HD {mean.hd:.2f} mm"
    )
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    from bussam.config import load_config
    from bussam.train import gradcheck

    cfg = load_config(args.config)
    report = gradcheck(cfg.model, tolerance=args.tol, seed=args.seed)
    for line in report.lines():
        print(line)
    if not report.passed:
        print("gradcheck FAILED: " + ", ".join(report.failing()), file=sys.stderr)
        return EXIT_CHECK
    print("gradcheck passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="bussam", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic lesion corpus")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--count", required=True, type=int)
    s.add_argument("--size", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)

    s = sub.add_parser("split", help="write a per-class 4:1 split.manifest")
    s.add_argument("--dir", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_split)

    s = sub.add_parser("train", help="fine-tune the trainable partition")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--log", type=Path, default=None)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on the test split")
    s.add_argument("--ckpt", required=True, type=Path)
    s.add_argument("--data", required=True, type=Path)
    s.add_argument("--csv", required=True, type=Path)
    s.add_argument("--save-masks", type=Path, default=None)
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of every trainable group")
    s.add_argument("--config", required=True, type=Path)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except BussamError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
