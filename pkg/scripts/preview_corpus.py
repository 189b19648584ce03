#!/usr/bin/env python3
"""Render a contact sheet of phantoms with mask outlines, one row per class.

Usage:
    python scripts/preview_corpus.py --out preview.png [--seed 0] [--cols 6]
"""

import argparse

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from anatomyssl.phantom import PhantomSpec, generate_phantom  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="preview.png")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--cols", type=int, default=6)
    args = ap.parse_args()

    fig, axes = plt.subplots(3, args.cols, figsize=(2 * args.cols, 6))
    for cls in range(3):
        for col in range(args.cols):
            spec = PhantomSpec(class_id=cls,
                               seed=args.seed + cls * args.cols + col)
            sample = generate_phantom(spec)
            ax = axes[cls][col]
            ax.imshow(sample.image, cmap="gray", vmin=0, vmax=1)
            for mask in sample.masks:
                ax.contour(mask.astype(float), levels=[0.5],
                           colors="tab:red", linewidths=0.6)
            ax.set_xticks([])
            ax.set_yticks([])
            if col == 0:
                ax.set_ylabel(f"class {cls}")
    fig.tight_layout()
    fig.savefig(args.out, dpi=110)
    print(f"wrote {args.out} "
          f"({3 * args.cols} phantoms, rows = classes)")


if __name__ == "__main__":
    main()
