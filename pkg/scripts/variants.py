"""Peak robustness of FGSM, FGSM+RI and FGSM+GradAlign, and their epoch times.

    python scripts/variants.py --out runs/variants --seeds 0 1 2
"""

import argparse
from pathlib import Path

from robustft import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eps", type=float, default=desk.STABLE_EPS)
    args = ap.parse_args()
    ckpt = desk.pretrain(args.out)
    runs = [desk.regularizer_parity(args.out, ckpt, s, args.eps) for s in args.seeds]
    for attack in runs[0]:
        peaks = [r[attack] for r in runs]
        print(f"{attack:15} peaks {' '.join(f'{p:.3f}' for p in peaks)}  median {desk.median(peaks):.3f}")
    rows = desk.epoch_times(args.out, ckpt, ("fgsm", "fgsm_ri", "fgsm_gradalign"), eps=args.eps)
    for r in rows:
        print(f"{r['peft']:13} {r['attack']:15} {float(r['median_epoch_sec']):.3f} s/epoch")


if __name__ == "__main__":
    main()
