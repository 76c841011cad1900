"""FGSM vs PGD-7 similarity across eps for linear-probe models, plus the report.

    python scripts/similarity_trend.py --out runs/similarity
"""

import argparse
from pathlib import Path

from robustft import desk


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args()
    ckpt = desk.pretrain(args.out)
    sweep = desk.lp_sweep(args.out, ckpt)
    rows = desk.similarity(args.out, sweep)
    desk.cli("report", args.out / "report", extra=[sweep, args.out / "similarity"])
    print("eps   mean_cos  loss_ratio")
    for r in rows:
        print(f"{float(r['eps']):4g}  {float(r['mean_cos']):.4f}    {float(r['loss_ratio']):.4f}")
    print(f"report: {args.out / 'report' / 'report.md'}")


if __name__ == "__main__":
    main()
