"""Train the toy model with each attention component switched off and tabulate the results."""

import argparse
import csv
import dataclasses
import sys

from lsformer.config import OptimConfig, RunConfig
from lsformer.data import synth_dataset
from lsformer.model import toy_config
from lsformer.train import train

VARIANTS = (("full", None), ("no-SDA", "use_sda"), ("no-CRA", "use_cra"), ("no-SCDF", "use_scdf"), ("no-DWC", "use_dwc"))


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="CSV path (stdout if omitted)")
    args = ap.parse_args()

    train_data = synth_dataset("oriented-bars", 200, 4, 16, seed=args.seed + 1)
    val_data = synth_dataset("oriented-bars", 100, 4, 16, seed=args.seed + 2)
    base = toy_config(seed=args.seed)
    rows = []
    for name, flag in VARIANTS:
        attn = base.attn if flag is None else dataclasses.replace(base.attn, **{flag: False})
        cfg = RunConfig(model=dataclasses.replace(base, attn=attn), optim=OptimConfig(epochs=args.epochs), seed=args.seed)
        last = train(cfg, train_data, val_data).history[-1]
        rows.append([name, f"{last['loss']:.4f}", f"{last['train_acc']:.4f}", f"{last['val_acc']:.4f}"])
        print(f"{name:<8} loss {rows[-1][1]} train {rows[-1][2]} held-out {rows[-1][3]}", file=sys.stderr)

    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["variant", "final_train_loss", "train_acc", "val_acc"])
    w.writerows(rows)
    if args.out:
        fh.close()


if __name__ == "__main__":
    main()
