#!/usr/bin/env python3
"""Run the full component ablation grid (7 arms) plus the 4-arm damage
decomposition from the checked-in overlays, and print the merged table.

Usage:
    python scripts/run_ablation_grid.py --out runs/ablation \
        [--config configs/ablation_base.json] [--seeds 0,1,2]
"""

import argparse
import csv
import sys
from collections import defaultdict
from pathlib import Path

from anatomyssl.cli import dispatch


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", required=True)
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()

    argv = ["ablate",
            "--arms", "symmetric,lpe,multiscale,cp",
            "--damage-arms", "shuffle,noise,occlusion,all-off",
            "--seeds", args.seeds,
            "--out", args.out]
    if args.config:
        argv += ["--config", args.config]
    code = dispatch(argv)
    if code != 0:
        sys.exit(code)

    by_arm = defaultdict(list)
    with (Path(args.out) / "merged.csv").open() as fh:
        for row in csv.DictReader(fh):
            by_arm[row["arm"]].append(float(row["probe_accuracy"]))
    print(f"{'arm':<28} {'median acc':>10}  per-seed")
    for arm, accs in sorted(by_arm.items()):
        med = sorted(accs)[len(accs) // 2]
        print(f"{arm:<28} {med:>10.3f}  {[round(a, 3) for a in accs]}")


if __name__ == "__main__":
    main()
