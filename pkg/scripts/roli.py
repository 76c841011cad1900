"""RoLI (FGSM linear probe, then FGSM full fine-tuning) against direct FGSM full
fine-tuning at the same total epoch budget, over several seeds.

    python scripts/roli.py --out runs/roli --seeds 0 1 2
"""

import argparse
from pathlib import Path

from robustft import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--eps", type=float, default=desk.PRETRAIN_EPS)
    args = ap.parse_args()
    ckpt = desk.pretrain(args.out)
    direct, roli = [], []
    for s in args.seeds:
        d, r = desk.roli_vs_direct(args.out, ckpt, s, args.eps)
        direct.append(d)
        roli.append(r)
        print(f"seed {s}: direct {d:.3f}  RoLI {r:.3f}")
    print(f"median: direct {desk.median(direct):.3f}  RoLI {desk.median(roli):.3f}")


if __name__ == "__main__":
    main()
