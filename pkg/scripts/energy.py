"""Per-block SOP/energy table for a checkpoint, or for a fresh toy model when none is given."""

import argparse

import numpy as np

from lsformer.data import load_container, replicate_static, synth_dataset
from lsformer.metrics import energy_self_test, profile_model
from lsformer.model import LSFormer, load_checkpoint, toy_config
from lsformer.tensor import Tensor


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint")
    ap.add_argument("--data", help="dataset container (synthetic bars if omitted)")
    ap.add_argument("--samples", type=int, default=16)
    args = ap.parse_args()

    model = load_checkpoint(args.checkpoint) if args.checkpoint else LSFormer(toy_config())
    cfg = model.cfg
    if args.data:
        data = load_container(args.data)
    else:
        data = synth_dataset("oriented-bars", max(1, args.samples // cfg.num_classes), cfg.num_classes, cfg.height, seed=5)
    x = data.samples[: args.samples]
    x = replicate_static(x, cfg.timesteps) if x.ndim == 4 else np.swapaxes(x, 0, 1)
    report = profile_model(model, Tensor(x))
    print(report.to_text())
    print(f"\nANN-equivalent energy at 12.5 pJ/FLOP: {report.ann_energy():.4e} J")
    print("\nself-test:")
    for name, n, expected, got, ok in energy_self_test():
        print(f"  {name:<13} {n / 1e9:.2f} G SOPs -> {got * 1e3:.3f} mJ (expected {expected * 1e3:.2f}) {'ok' if ok else 'FAIL'}")


if __name__ == "__main__":
    main()
