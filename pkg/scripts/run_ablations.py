"""Ablation table over the use_cnn / use_pos_adapter / use_cba switches.

Expects a data directory with a split manifest (see run_convergence.py).

    python3 scripts/run_ablations.py --data /tmp/conv/data --csv /tmp/ablations.csv
"""
import argparse
import csv
from pathlib import Path

from bussam.config import load_config, replace_model
from bussam.data import preprocess
from bussam.train import evaluate_model, load_split, train

ROOT = Path(__file__).resolve().parents[1]

VARIANTS = {
    "full": {},
    "no_cnn": dict(use_cnn=False, use_cba=False),
    "no_pos_adapter": dict(use_pos_adapter=False),
    "no_cba": dict(use_cba=False),
    "baseline": dict(use_cnn=False, use_cba=False, use_pos_adapter=False),
}


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--data", type=Path, required=True)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "toy.cfg")
    ap.add_argument("--csv", type=Path, default=None)
    ap.add_argument("--only", nargs="*", choices=sorted(VARIANTS), default=None)
    args = ap.parse_args()

    base = load_config(args.config)
    s = base.model.input_size
    test = [preprocess(p, s) for p in load_split(args.data, s, base.spacing_mm)[1]]
    rows = []
    for name in args.only or VARIANTS:
        res = train(replace_model(base, **VARIANTS[name]), args.data)
        m = evaluate_model(res.model, test, batch=base.batch).mean()
        n_train = len(res.store.trainable_names())
        rows.append([name, f"{m.acc:.2f}", f"{m.se:.2f}", f"{m.dice:.2f}", f"{m.iou:.2f}", f"{m.hd:.2f}", n_train])
        print(f"{name:<15s} Dice {m.dice:6.2f}  IoU {m.iou:6.2f}  HD {m.hd:6.2f}  ({res.seconds:.0f}s)", flush=True)
    if args.csv is not None:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "acc", "se", "dice", "iou", "hd_mm", "trainable_tensors"])
            w.writerows(rows)


if __name__ == "__main__":
    main()
