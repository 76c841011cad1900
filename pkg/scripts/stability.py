"""Stability of single-step training: from-scratch FGSM versus linear probing.

Trains FGSM from scratch on the source task for each (eps, lr) in the grid and
prints the robust-accuracy curve with the overfit verdict, then the verdicts of
the linear-probe sweep from the robust checkpoint.

    python scripts/stability.py --out runs/stability --eps 32 48 64 --lr 0.05
"""

import argparse
from pathlib import Path

from robustft import desk
from robustft.cli import read_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--eps", type=float, nargs="+", default=[desk.SCRATCH_EPS])
    ap.add_argument("--lr", type=float, nargs="+", default=[desk.SCRATCH_LR])
    ap.add_argument("--epochs", type=int, default=desk.SCRATCH_EPOCHS)
    args = ap.parse_args()
    for lr in args.lr:
        for eps in args.eps:
            curve, verdict = desk.scratch_fgsm(args.out / f"lr{lr:g}", eps, args.epochs, lr)
            peak = max(curve)
            print(f"scratch eps {eps:g} lr {lr:g}: peak {peak:.3f} final {curve[-1]:.3f} "
                  f"detected {verdict.detected} onset {verdict.onset_epoch}")
            print("  " + " ".join(f"{v:.2f}" for v in curve))
    ckpt = desk.pretrain(args.out)
    _, rows = read_csv(desk.lp_sweep(args.out, ckpt) / "summary.csv")
    for r in rows:
        if r["attack"] == "fgsm":
            print(f"linear probe eps {float(r['eps']):g}: peak {float(r['peak_robust_acc']):.3f} overfit {r['overfit']}")


if __name__ == "__main__":
    main()
