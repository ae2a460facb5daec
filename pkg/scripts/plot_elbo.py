"""Train and validation ELBO curves from one or more trace files.

    python scripts/plot_elbo.py runs/benchmark/d2pcca/trace.csv runs/benchmark/d2pcca+kl/trace.csv -o elbo.png
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from d2pcca.training import read_trace  # noqa: E402


def main():
    p = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    p.add_argument("traces", nargs="+")
    p.add_argument("-o", "--output", default="elbo.png")
    args = p.parse_args()

    fig, (ax_tr, ax_va) = plt.subplots(1, 2, figsize=(10, 3.8), sharex=True)
    for path in args.traces:
        recs = read_trace(path)
        label = Path(path).parent.name
        ep = [r.epoch for r in recs]
        ax_tr.plot(ep, [r.train_elbo_per_step for r in recs], label=label)
        ax_va.plot(ep, [r.val_elbo_per_step for r in recs], label=label)
    ax_tr.set_title("train ELBO per step")
    ax_va.set_title("validation ELBO per step")
    for ax in (ax_tr, ax_va):
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    ax_va.legend()
    fig.tight_layout()
    fig.savefig(args.output, dpi=120)
    print(f"wrote {args.output}")


if __name__ == "__main__":
    main()
