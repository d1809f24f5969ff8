"""Command-line entry point: ``shapley-relu {eval,train,interpret,figures,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import data_io, experiment, relevance
from .nn import Activation, Network, NumericalError, grad_check
from .shapley_core import (
    N_MAX_EXACT,
    BiasMode,
    NeuronView,
    approx_shapley,
    exact_shapley,
    gate_profile,
    gate_terms,
    mc_shapley,
    sa_value,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("shapley_relu")

# options whose values are comma lists that may start with "-"
_LIST_OPTIONS = {"-p", "--products", "-b", "--bias", "--layers", "--classes"}


def _float_list(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _int_list(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _glue_negative_values(argv: List[str]) -> List[str]:
    """Turn ``-p -1,4`` into ``-p=-1,4`` so argparse does not read ``-1,4`` as a flag."""
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if tok in _LIST_OPTIONS and i + 1 < len(argv) and argv[i + 1].startswith("-") and argv[i + 1][1:2].isdigit():
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    nv = NeuronView(np.asarray(args.products, dtype=float), args.bias)
    mode = BiasMode(args.bias_mode)
    approx = approx_shapley(nv)
    mc = mc_shapley(nv, mode, args.mc_paths, args.seed)
    exact = exact_shapley(nv, mode) if nv.n <= N_MAX_EXACT else None
    print(f"neuron: n={nv.n} bias={nv.bias:g} s={nv.preactivation:g} relu(s)={max(nv.preactivation, 0.0):g} "
          f"SA={sa_value(nv):.6f} bias-mode={mode.value}")
    header = f"{'k':>3} {'product':>10} {'exact':>10} {'mc':>10} {'mc_se':>9} {'approx':>10} {'approx-exact':>13}"
    print(header)
    for k in range(nv.n):
        ex = f"{exact.alpha[k]:10.4f}" if exact else f"{'n/a':>10}"
        err = f"{approx.alpha[k] - exact.alpha[k]:13.4f}" if exact else f"{'n/a':>13}"
        print(f"{k:>3} {nv.products[k]:10.4f} {ex} {mc.alpha[k]:10.4f} {mc.stderr[k]:9.4f} {approx.alpha[k]:10.4f} {err}")
    ex_sum = f"{exact.total:10.4f}" if exact else f"{'n/a':>10}"
    print(f"{'sum':>3} {'':>10} {ex_sum} {mc.total:10.4f} {'':>9} {approx.total:10.4f}")
    if exact:
        print(f"baseline v(empty)={exact.baseline:g}  max|approx-exact|={np.abs(approx.alpha - exact.alpha).max():.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TRAIN_OVERRIDES = {
    "layers": "layers", "activation": "activations", "optimizer": "optimizer", "lr": "lr",
    "beta1": "beta1", "beta2": "beta2", "epochs": "epochs", "batch_size": "batch_size",
    "train_subset": "train_subset", "val_subset": "val_subset", "repetitions": "repetitions",
    "seed": "seed", "jobs": "jobs", "include_correction": "include_correction",
    "data_dir": "data_dir", "out_dir": "out_dir", "log_every": "log_every",
    "epsilon": "epsilon", "mc_paths": "mc_paths",
}


def build_config(args) -> experiment.ExperimentConfig:
    base = {}
    if args.config:
        base = experiment.ExperimentConfig.from_json(args.config).to_dict()
    for flag, key in _TRAIN_OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[key] = value
    return experiment.ExperimentConfig.from_dict(base)


def cmd_train(args) -> int:
    cfg = build_config(args)
    t0 = time.perf_counter()
    results = experiment.run_experiment(cfg)
    out = experiment.write_outputs(cfg, results)
    summary = experiment.summarize(results)
    for act, s in summary.items():
        print(f"{act:>7}: final val acc {s['final_val_acc_mean']:.4f} +- {s['final_val_acc_std']:.4f} "
              f"over {s['repetitions'] - s['failures']} run(s), {s['failures']} failure(s)")
    print(f"wrote {out} in {time.perf_counter() - t0:.1f}s")
    if any(r.failure for r in results):
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# interpret


def select_images(ds: data_io.Dataset, n_images: int, seed: int, class_id: Optional[int] = None) -> np.ndarray:
    """Seeded sample of up to ``n_images``; restricted to one label when ``class_id`` is given."""
    idx = np.arange(len(ds)) if class_id is None else np.flatnonzero(ds.labels == class_id)
    rng = np.random.default_rng(seed if class_id is None else [seed, class_id])
    idx = np.sort(rng.permutation(idx)[:n_images])
    return ds.images[idx]


def cmd_interpret(args) -> int:
    net = data_io.load_checkpoint(args.checkpoint)
    ds = data_io.load_mnist(args.data_dir, args.split)
    if net.layers[0].fan_in != ds.images.shape[1]:
        raise experiment.ConfigError(
            f"checkpoint expects {net.layers[0].fan_in} inputs, data has {ds.images.shape[1]}"
        )
    out_dir = Path(args.out_dir)
    shared = None if args.class_images else select_images(ds, args.n_images, args.seed)
    for c in args.classes:
        images = select_images(ds, args.n_images, args.seed, c) if args.class_images else shared
        t0 = time.perf_counter()
        if args.method == "sensitivity":
            pair = relevance.sensitivity_heatmaps(net, images, c, shape=ds.image_shape)
            prefix = "sensitivity"
        else:
            rel = relevance.shapley_input_relevance(net, images, c, args.mc_paths, args.seed, args.epsilon)
            pair = relevance.aggregate_heatmaps(rel, images, c, shape=ds.image_shape, average=args.average)
            prefix = "heatmap"
        relevance.write_heatmaps(out_dir, pair, prefix)
        print(f"class {c}: {len(images)} images, mean pos {pair.positive.mean():.4g}, "
              f"mean neg {pair.negative.mean():.4g} ({time.perf_counter() - t0:.1f}s)")
    print(f"wrote {args.method} heatmaps to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# figures


def gate_profile_rows(n: int, bias: float, span: float, points: int, seed: int):
    rng = np.random.default_rng(seed)
    products = rng.uniform(-1.0, 1.0, size=n)
    nv = NeuronView(products, bias)
    values = np.linspace(-span, span, points)
    return values, gate_profile(nv, 0, values)


def sa_scatter_rows(n: int, bias: float, samples: int, seed: int):
    rng = np.random.default_rng(seed)
    p = rng.uniform(-1.0, 1.0, size=(samples, n))
    _, _, _, gate, _ = gate_terms(p.sum(axis=1), (p * p).sum(axis=1), bias)
    s = p.sum(axis=1) + bias
    return s, gate * s, gate


def cmd_figures(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "gate_profile":
        values, gate = gate_profile_rows(args.n, args.bias, args.span, args.points, args.seed)
        path = out / "gate_profile.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["value", "phi_gate"])
            w.writerows((repr(float(v)), repr(float(g))) for v, g in zip(values, gate))
    else:
        s, sa, gate = sa_scatter_rows(args.n, args.bias, args.samples, args.seed)
        path = out / "sa_scatter.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["s", "sa", "relu", "phi_gate"])
            w.writerows((repr(float(a)), repr(float(b)), repr(max(float(a), 0.0)), repr(float(g)))
                        for a, b, g in zip(s, sa, gate))
    print(f"wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(args.seed)
    failed = False
    for act in args.activation or ["relu", "sa", "shaplu"]:
        if args.checkpoint:
            net = data_io.load_checkpoint(args.checkpoint).with_activation(Activation(act), args.include_correction)
        else:
            net = Network.dense(args.layers, hidden=Activation(act), seed=args.seed,
                                include_correction=args.include_correction)
            for layer in net.layers:
                layer.bias = rng.normal(0.0, 0.3, size=layer.fan_out)
        x = rng.uniform(0.0, 1.0, size=(args.batch, net.layers[0].fan_in))
        labels = rng.integers(0, net.layers[-1].fan_out, size=args.batch)
        report = grad_check(net, x, labels, tolerance=args.tolerance, n_params=args.n_params, seed=args.seed)
        print(f"[{act}] max rel err (gated) {report.max_rel_err:.3e}  "
              f"ShapLU deviation {report.shaplu_deviation:.3e}  {'PASS' if report.passed else 'FAIL'}")
        for line in report.lines():
            print("   " + line)
        failed |= not report.passed
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shapley-relu", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("eval", help="Shapley values of one ReLU neuron: exact, MC and approximation")
    p.add_argument("-p", "--products", type=_float_list, required=True, help="comma list of w_i*x_i")
    p.add_argument("-b", "--bias", type=float, default=0.0)
    p.add_argument("--bias-mode", choices=[m.value for m in BiasMode], default=BiasMode.ANCHORED.value)
    p.add_argument("--mc-paths", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train", help="seeded MNIST training comparison")
    p.add_argument("--config", help="JSON config; flags override its values")
    p.add_argument("--layers", type=_int_list)
    p.add_argument("--activation", action="append", choices=["relu", "sa", "shaplu"])
    p.add_argument("--optimizer", choices=["sgd", "adam"])
    p.add_argument("--lr", type=float)
    p.add_argument("--beta1", type=float)
    p.add_argument("--beta2", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--train-subset", type=int)
    p.add_argument("--val-subset", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--log-every", type=int)
    p.add_argument("--include-correction", action="store_true", default=None)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--mc-paths", type=int)
    p.add_argument("--data-dir")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("interpret", help="per-class relevance heatmaps for a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", default="data/mnist")
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--classes", type=_int_list, default=list(range(10)))
    p.add_argument("--method", choices=["shapley", "sensitivity"], default="shapley")
    p.add_argument("--mc-paths", type=int, default=1000)
    p.add_argument("--n-images", type=int, default=1000)
    p.add_argument("--class-images", action="store_true",
                   help="average over images labelled with the class instead of one shared sample")
    p.add_argument("--average", choices=["images", "counted"], default="images",
                   help="divide pixel sums by the image count or by the per-pixel non-black count")
    p.add_argument("--epsilon", type=float, default=relevance.DEFAULT_EPSILON)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs/interpret")
    p.set_defaults(func=cmd_interpret)

    p = sub.add_parser("figures", help="CSV data for the gate profile and SA scatter plots")
    p.add_argument("kind", choices=["gate_profile", "sa_scatter"])
    p.add_argument("--n", type=int, default=5, help="inputs per neuron")
    p.add_argument("--bias", type=float, default=0.0)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--span", type=float, default=20.0, help="gate_profile sweeps [-span, span]")
    p.add_argument("--points", type=int, default=2001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="runs/figures")
    p.set_defaults(func=cmd_figures)

    p = sub.add_parser("gradcheck", help="finite-difference check of the backward passes")
    p.add_argument("--activation", action="append", choices=["relu", "sa", "shaplu"])
    p.add_argument("--layers", type=_int_list, default=[8, 16, 16, 4])
    p.add_argument("--checkpoint")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--n-params", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--include-correction", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(_glue_negative_values(argv))
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (experiment.ConfigError, ValueError) as exc:
        if isinstance(exc, data_io.DataFormatError):
            print(f"data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
