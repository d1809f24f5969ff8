"""Seeded MNIST training comparisons between ReLU, SA and ShapLU."""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data_io
from .nn import Activation, Network, NumericalError, cross_entropy_loss, make_optimizer, train_step

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    layers: List[int] = field(default_factory=lambda: [784, 100, 50, 10])
    activations: List[str] = field(default_factory=lambda: ["relu"])
    optimizer: str = "adam"
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 4
    batch_size: int = 10
    train_subset: int = 1000
    val_subset: Optional[int] = None  # None: the full test split
    repetitions: int = 10
    seed: int = 0
    epsilon: float = 1e-6
    mc_paths: int = 1000
    include_correction: bool = False
    log_every: int = 10
    jobs: int = 1
    data_dir: str = "data/mnist"
    out_dir: str = "runs/mnist"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if len(self.layers) < 2 or any(int(n) < 1 for n in self.layers):
            raise ConfigError(f"invalid layer sizes {self.layers}")
        for act in self.activations:
            try:
                a = Activation(act)
            except ValueError:
                raise ConfigError(f"unknown activation {act!r}") from None
            if a not in (Activation.RELU, Activation.SA, Activation.SHAPLU):
                raise ConfigError(f"{act!r} is not a hidden-layer backend (relu, sa, shaplu)")
        if not self.activations:
            raise ConfigError("at least one activation is required")
        if self.optimizer.lower() not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1 or self.train_subset < 1:
            raise ConfigError("lr, epochs, batch_size and train_subset must be positive")
        if self.mc_paths < 2:
            raise ConfigError("mc_paths must be >= 2")

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return asdict(self)


def repetition_seeds(master_seed: int, rep: int) -> Tuple[int, int]:
    """(init seed, batch-order seed) for one repetition, shared by every backend."""
    init, order = np.random.SeedSequence([master_seed, rep]).generate_state(2, np.uint64)
    return int(init), int(order)


def evaluate(net: Network, images, labels, chunk: int = 2000) -> Tuple[float, float]:
    """(mean cross-entropy, accuracy) over a dataset."""
    loss_sum, correct = 0.0, 0
    for start in range(0, len(labels), chunk):
        x = images[start : start + chunk]
        y = labels[start : start + chunk]
        probs = net.forward(x)
        loss_sum += cross_entropy_loss(probs, y)[0] * len(y)
        correct += int((probs.argmax(axis=1) == y).sum())
    return loss_sum / len(labels), correct / len(labels)


@dataclass
class RepetitionResult:
    activation: str
    rep: int
    rows: List[dict]
    net: Optional[Network]
    failure: Optional[str] = None


def run_repetition(cfg: ExperimentConfig, activation: str, rep: int, train, val) -> RepetitionResult:
    init_seed, order_seed = repetition_seeds(cfg.seed, rep)
    net = Network.dense(
        cfg.layers,
        hidden=Activation(activation),
        seed=init_seed,
        include_correction=cfg.include_correction,
    )
    extra = {"beta1": cfg.beta1, "beta2": cfg.beta2} if cfg.optimizer.lower() == "adam" else {}
    opt = make_optimizer(cfg.optimizer, cfg.lr, **extra)
    run_id = f"{activation}-r{rep}"
    common = {"run_id": run_id, "seed": init_seed, "activation": activation, "optimizer": cfg.optimizer, "lr": cfg.lr}
    rows = []

    def record(epoch, batch, with_val):
        loss, acc = evaluate(net, train.images, train.labels)
        val_acc = evaluate(net, val.images, val.labels)[1] if with_val else None
        rows.append({**common, "epoch": epoch, "batch": batch, "train_loss": loss, "train_acc": acc, "val_acc": val_acc})

    record(0, 0, True)
    n_batches = math.ceil(len(train) / cfg.batch_size)
    step = 0
    try:
        for epoch, b, x, y in data_io.batches(train, cfg.batch_size, order_seed, cfg.epochs):
            train_step(net, opt, x, y)
            step += 1
            end_of_epoch = b == n_batches - 1
            if end_of_epoch or step % cfg.log_every == 0:
                record(epoch + 1 if end_of_epoch else epoch + (b + 1) / n_batches, step, end_of_epoch)
    except NumericalError as exc:
        log.warning("%s failed at step %d: %s", run_id, step, exc)
        rows.append({**common, "epoch": float("nan"), "batch": step, "train_loss": float("nan"),
                     "train_acc": float("nan"), "val_acc": float("nan")})
        return RepetitionResult(activation, rep, rows, None, failure=str(exc))
    return RepetitionResult(activation, rep, rows, net)


_WORKER: dict = {}


def _worker_init(cfg_dict, train, val):
    _WORKER.update(cfg=ExperimentConfig.from_dict(cfg_dict), train=train, val=val)


def _worker_run(task):
    activation, rep = task
    return run_repetition(_WORKER["cfg"], activation, rep, _WORKER["train"], _WORKER["val"])


def load_data(cfg: ExperimentConfig):
    """Seeded training subset from the train split and the disjoint test split."""
    train_full = data_io.load_mnist(cfg.data_dir, "train")
    val = data_io.load_mnist(cfg.data_dir, "test")
    train = data_io.take_subset(train_full, cfg.train_subset, cfg.seed)
    if cfg.val_subset is not None:
        val = data_io.take_subset(val, cfg.val_subset, cfg.seed)
    return train, val


def run_experiment(cfg: ExperimentConfig, train=None, val=None) -> List[RepetitionResult]:
    if train is None or val is None:
        train, val = load_data(cfg)
    tasks = [(act, rep) for act in cfg.activations for rep in range(cfg.repetitions)]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(cfg.jobs, initializer=_worker_init, initargs=(cfg.to_dict(), train, val)) as pool:
            results = list(pool.map(_worker_run, tasks))
    else:
        results = []
        for act, rep in tasks:
            log.info("training %s repetition %d", act, rep)
            results.append(run_repetition(cfg, act, rep, train, val))
    return results


AGGREGATE_COLUMNS = [
    "activation", "epoch", "batch", "n_runs",
    "train_loss_mean", "train_loss_std",
    "train_acc_mean", "train_acc_std",
    "val_acc_mean", "val_acc_std",
]


def _mean_std(values: Sequence[float]) -> Tuple[float, float]:
    v = np.asarray([x for x in values if x is not None], dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    std = float(v.std(ddof=1)) if v.size > 1 else float("nan")
    return float(v.mean()), std


def aggregate(results: Sequence[RepetitionResult]) -> List[dict]:
    """Mean and (N-1) standard deviation across successful repetitions per log point."""
    out = []
    activations = list(dict.fromkeys(r.activation for r in results))
    for act in activations:
        good = [r for r in results if r.activation == act and r.failure is None]
        if not good:
            continue
        for i, row in enumerate(good[0].rows):
            group = [r.rows[i] for r in good]
            agg = {"activation": act, "epoch": row["epoch"], "batch": row["batch"], "n_runs": len(group)}
            for key in ("train_loss", "train_acc", "val_acc"):
                if row[key] is None:
                    agg[f"{key}_mean"] = agg[f"{key}_std"] = None
                else:
                    agg[f"{key}_mean"], agg[f"{key}_std"] = _mean_std([g[key] for g in group])
            out.append(agg)
    return out


def epoch_boundaries(agg_rows: Sequence[dict], activation: str) -> List[dict]:
    return [r for r in agg_rows if r["activation"] == activation and r["val_acc_mean"] is not None]


def summarize(results: Sequence[RepetitionResult]) -> Dict[str, dict]:
    summary = {}
    for act in dict.fromkeys(r.activation for r in results):
        runs = [r for r in results if r.activation == act]
        finals = [r.rows[-1]["val_acc"] for r in runs if r.failure is None]
        mean, std = _mean_std(finals)
        summary[act] = {
            "repetitions": len(runs),
            "failures": sum(r.failure is not None for r in runs),
            "final_val_acc_mean": mean,
            "final_val_acc_std": std,
        }
    return summary


def write_outputs(cfg: ExperimentConfig, results: Sequence[RepetitionResult], out_dir=None) -> Path:
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    rows = [row for r in results for row in r.rows]
    data_io.write_csv_metrics(out / "metrics.csv", rows)
    data_io.write_csv_metrics(out / "aggregate.csv", aggregate(results), AGGREGATE_COLUMNS)
    for r in results:
        if r.net is not None:
            data_io.save_checkpoint(out / f"checkpoint_{r.activation}_r{r.rep}.shpg", r.net)
    (out / "summary.json").write_text(json.dumps(summarize(results), indent=2, sort_keys=True) + "\n")
    return out
