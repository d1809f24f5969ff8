"""Plot the CSV/PGM artefacts written by run_mnist_comparison.py (needs matplotlib).

    python3 scripts/plot_figures.py runs/mnist
"""

import argparse
import csv
from pathlib import Path

import numpy as np


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_training(ax, rows):
    for act in dict.fromkeys(r["activation"] for r in rows):
        sel = [r for r in rows if r["activation"] == act]
        epoch = np.array([float(r["epoch"]) for r in sel])
        mean = np.array([float(r["train_acc_mean"]) for r in sel])
        std = np.array([float(r["train_acc_std"]) for r in sel])
        ax.plot(epoch, mean, label=act)
        ax.fill_between(epoch, mean - std, mean + std, alpha=0.2)
    ax.set_xlabel("epoch")
    ax.set_ylabel("training accuracy")
    ax.legend()


def main(argv=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("run_dir", nargs="?", default="runs/mnist")
    args = p.parse_args(argv)
    run = Path(args.run_dir)
    out = run / "plots"
    out.mkdir(parents=True, exist_ok=True)

    fig, axes = plt.subplots(1, 3, figsize=(15, 4))
    gp = read_csv(run / "figures" / "gate_profile.csv")
    axes[0].plot([float(r["value"]) for r in gp], [float(r["phi_gate"]) for r in gp])
    axes[0].set_xlabel("product $w_k x_k$")
    axes[0].set_ylabel("gate")
    sc = read_csv(run / "figures" / "sa_scatter.csv")
    s = np.array([float(r["s"]) for r in sc])
    axes[1].scatter(s, [float(r["sa"]) for r in sc], s=3, label="SA")
    grid = np.linspace(s.min(), s.max(), 100)
    axes[1].plot(grid, np.maximum(grid, 0), "k--", lw=1, label="ReLU")
    axes[1].legend()
    axes[1].set_xlabel("pre-activation")
    plot_training(axes[2], read_csv(run / "train" / "aggregate.csv"))
    fig.tight_layout()
    fig.savefig(out / "curves.png", dpi=120)

    heat = run / "heatmaps"
    for prefix in ("heatmap", "sensitivity"):
        if not (heat / f"{prefix}_0_pos.csv").exists():
            continue
        fig, axes = plt.subplots(2, 10, figsize=(15, 3.4))
        for c in range(10):
            for row, tag in enumerate(("pos", "neg")):
                path = heat / f"{prefix}_{c}_{tag}.csv"
                if path.exists():
                    axes[row, c].imshow(np.loadtxt(path, delimiter=","), cmap="gray")
                axes[row, c].axis("off")
        fig.tight_layout()
        fig.savefig(out / f"{prefix}s.png", dpi=120)
    print(f"wrote plots to {out}")


if __name__ == "__main__":
    main()
