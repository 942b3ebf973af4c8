"""Synthetic convergence experiment: generate, split, train the toy config, evaluate.

    python3 scripts/run_convergence.py --work /tmp/conv
"""
import argparse
from pathlib import Path

from bussam.config import load_config
from bussam.data import read_labels, split_dataset, synth_dataset, write_manifest
from bussam.train import evaluate, train

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", type=Path, required=True)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.cfg")
    ap.add_argument("--count", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(args.config)
    data = args.work / "data"
    synth_dataset(args.count, cfg.model.input_size, seed=args.seed, out_dir=data)
    tr, te = split_dataset(read_labels(data), seed=args.seed)
    write_manifest(data, tr, te)
    print(f"{len(tr)} train / {len(te)} test samples in {data}")

    res = train(cfg, data, args.work / "model.ckpt", args.work / "loss.csv",
                on_epoch=lambda e, lo, vd: print(f"epoch {e:3d} loss {lo:.5f} val_dice {vd:.2f}", flush=True))
    m = evaluate(args.work / "model.ckpt", data, csv_out=args.work / "metrics.csv").mean()
    print(f"trained in {res.seconds:.0f}s; first/final loss {res.epoch_losses[0]:.4f}/{res.epoch_losses[-1]:.4f}")
    print(f"test Acc {m.acc:.2f} Se {m.se:.2f} Dice {m.dice:.2f} IoU {m.iou:.2f} HD {m.hd:.2f} mm")


if __name__ == "__main__":
    main()
