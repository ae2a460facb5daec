"""Reconstruction mean and 95% band against the truth, from a band file.

    python scripts/plot_bands.py runs/benchmark/rec/bands_window0.csv --columns set1_1 set2_1 -o bands.png
"""

import argparse

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from d2pcca.data import read_bands  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("bands")
    p.add_argument("--columns", nargs="*", help="columns to draw (default: first of each set)")
    p.add_argument("-o", "--output", default="bands.png")
    args = p.parse_args()

    b = read_bands(args.bands)
    if args.columns:
        cols = args.columns
    else:
        seen, cols = set(), []
        for c, s in zip(b["column"], b["set"]):
            if s not in seen:
                seen.add(s)
                cols.append(c)
    fig, axes = plt.subplots(len(cols), 1, figsize=(8, 1.9 * len(cols)), sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], cols):
        sel = b["column"] == col
        if not np.any(sel):
            raise SystemExit(f"column {col!r} not in {args.bands}")
        t = b["step"][sel]
        ax.fill_between(t, b["lower"][sel], b["upper"][sel], alpha=0.25, label="95% band")
        ax.plot(t, b["mean"][sel], lw=1.5, label="reconstruction")
        ax.plot(t, b["truth"][sel], "k.", ms=3, label="truth")
        ax.set_ylabel(col)
    axes[0, 0].legend(loc="upper right", fontsize=8)
    axes[-1, 0].set_xlabel("step")
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
