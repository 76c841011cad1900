"""Per-epoch fine-tuning time and gradient-call counts by attack and PEFT mode.

    python scripts/timing.py --out runs/timing
"""

import argparse
from pathlib import Path

from robustft import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--attacks", nargs="+", default=["fgsm", "fgsm_ri", "fgsm_gradalign", "pgd"])
    ap.add_argument("--pefts", nargs="+", default=["full", "linear_probe"])
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    ckpt = desk.pretrain(args.out)
    rows = desk.epoch_times(args.out, ckpt, args.attacks, args.pefts, repeats=args.repeats)
    print(f"{'peft':13} {'attack':15} {'sec/epoch':>9} {'grad calls':>10} {'% of PGD':>8}")
    for r in rows:
        pct = f"{float(r['fgsm_pgd_pct']):.1f}" if r["fgsm_pgd_pct"] else ""
        print(f"{r['peft']:13} {r['attack']:15} {float(r['median_epoch_sec']):9.3f} {float(r['grad_calls']):10g} {pct:>8}")


if __name__ == "__main__":
    main()
