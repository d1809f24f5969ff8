"""Run the desk-scale MNIST comparison of ReLU, SA and ShapLU and produce every artefact.

    python3 scripts/run_mnist_comparison.py --data-dir data/mnist --out-dir runs/mnist

Writes training metrics and checkpoints (10 repetitions per backend), the
per-class heatmaps of the first ReLU repetition, and the figure CSVs.
"""

import argparse
import logging
import sys
from pathlib import Path

from shapley_relu import experiment
from shapley_relu.cli import main as cli_main


def parse_args(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data-dir", default="data/mnist")
    p.add_argument("--out-dir", default="runs/mnist")
    p.add_argument("--config", help="JSON experiment config; --data-dir/--out-dir still apply")
    p.add_argument("--activation", action="append", choices=["relu", "sa", "shaplu"],
                   help="repeatable; default all three")
    p.add_argument("--repetitions", type=int, default=10)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--mc-paths", type=int, default=1000)
    p.add_argument("--n-images", type=int, default=1000)
    p.add_argument("--skip-interpret", action="store_true")
    return p.parse_args(argv)


def main(argv=None):
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out_dir)
    base = experiment.ExperimentConfig.from_json(args.config).to_dict() if args.config else {}
    base.update(
        activations=args.activation or ["relu", "sa", "shaplu"],
        repetitions=args.repetitions,
        jobs=args.jobs,
        data_dir=args.data_dir,
        out_dir=str(out / "train"),
    )
    cfg = experiment.ExperimentConfig.from_dict(base)
    results = experiment.run_experiment(cfg)
    experiment.write_outputs(cfg, results)
    for act, s in experiment.summarize(results).items():
        print(f"{act:>7}: final val acc {s['final_val_acc_mean']:.4f} +- {s['final_val_acc_std']:.4f}")

    agg = experiment.aggregate(results)
    print("epoch-end mean train accuracy")
    for act in cfg.activations:
        curve = " ".join(f"{r['train_acc_mean']:.4f}" for r in experiment.epoch_boundaries(agg, act))
        print(f"{act:>7}: {curve}")

    codes = []
    if not args.skip_interpret:
        ckpt = out / "train" / "checkpoint_relu_r0.shpg"
        common = ["--checkpoint", str(ckpt), "--data-dir", args.data_dir, "--n-images", str(args.n_images)]
        codes.append(cli_main(["interpret", *common, "--mc-paths", str(args.mc_paths),
                               "--out-dir", str(out / "heatmaps")]))
        codes.append(cli_main(["interpret", *common, "--method", "sensitivity",
                               "--out-dir", str(out / "heatmaps")]))
    for kind in ("gate_profile", "sa_scatter"):
        codes.append(cli_main(["figures", kind, "--out-dir", str(out / "figures")]))
    return max(codes, default=0)


if __name__ == "__main__":
    sys.exit(main())
