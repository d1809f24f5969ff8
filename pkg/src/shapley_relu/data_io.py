"""MNIST IDX ingestion, batching and file emission (CSV, PGM, checkpoints)."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .nn import Activation, DenseLayer, Network

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataFormatError(ValueError):
    """A data file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: at byte offset {offset}: {message}")


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path, expected_magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise DataFormatError(path, len(raw), "file too short for the magic number")
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise DataFormatError(path, 0, f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if len(raw) < header:
        raise DataFormatError(path, len(raw), "truncated header")
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    need = int(np.prod(dims))
    have = len(raw) - header
    if have < need:
        raise DataFormatError(path, len(raw), f"truncated payload: expected {need} bytes, found {have}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_idx_images(path) -> np.ndarray:
    """IDX3 image file -> float array ``[N, rows, cols]`` scaled to [0, 1]."""
    return _parse_idx(path, IMAGES_MAGIC, 3).astype(float) / 255.0


def load_idx_labels(path) -> np.ndarray:
    return _parse_idx(path, LABELS_MAGIC, 1).astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write uint8 images ``[N, rows, cols]`` as IDX3 (used for fixtures)."""
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 3:
        raise ValueError("images must be a uint8 array [N, rows, cols]")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, 784] in [0, 1]
    labels: np.ndarray
    split: str = "train"
    image_shape: Tuple[int, int] = (28, 28)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


def _find(data_dir: Path, name: str) -> Path:
    for candidate in (data_dir / name, data_dir / (name + ".gz")):
        if candidate.exists():
            return candidate
    # some mirrors use a dot before "idx"
    dotted = name.replace("-idx", ".idx")
    for candidate in (data_dir / dotted, data_dir / (dotted + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found in {data_dir}")


def load_mnist(data_dir, split: str = "train") -> Dataset:
    """Load an MNIST split from ``data_dir`` using the standard file names."""
    image_name, label_name = MNIST_FILES[split]
    data_dir = Path(data_dir)
    image_path = _find(data_dir, image_name)
    images = load_idx_images(image_path)
    labels = load_idx_labels(_find(data_dir, label_name))
    if len(images) != len(labels):
        raise DataFormatError(
            image_path, 4, f"{len(images)} images but {len(labels)} labels in the matching label file"
        )
    n, rows, cols = images.shape
    return Dataset(images.reshape(n, rows * cols), labels, split, (rows, cols))


def take_subset(ds: Dataset, n: int, seed: int) -> Dataset:
    if n > len(ds):
        raise ValueError(f"asked for {n} samples from a dataset of {len(ds)}")
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return Dataset(ds.images[idx], ds.labels[idx], ds.split, ds.image_shape)


def batches(
    ds: Dataset,
    batch_size: int,
    seed: int,
    epochs: int = 1,
    reshuffle_each_epoch: bool = True,
) -> Iterator[Tuple[int, int, np.ndarray, np.ndarray]]:
    """Yield ``(epoch, batch_index, inputs, labels)``; every sample once per epoch."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ds))
    for epoch in range(epochs):
        if epoch and reshuffle_each_epoch:
            order = rng.permutation(len(ds))
        for b, start in enumerate(range(0, len(ds), batch_size)):
            idx = order[start : start + batch_size]
            yield epoch, b, ds.images[idx], ds.labels[idx]


def synthetic_digits(n: int, seed: int, shape: Tuple[int, int] = (28, 28), n_classes: int = 10):
    """Seeded stand-in for MNIST: each class lights a different central bar.

    Returns ``(uint8 images [n, rows, cols], labels [n])``; meant for tests and
    smoke runs without the real data.
    """
    rng = np.random.default_rng(seed)
    rows, cols = shape
    labels = rng.integers(0, n_classes, size=n)
    images = np.zeros((n, rows, cols))
    top, left = rows // 4, cols // 4
    span_r, span_c = rows - 2 * top, cols - 2 * left
    for i, c in enumerate(labels):
        r0 = top + (c * span_r) // n_classes
        images[i, r0 : r0 + max(span_r // n_classes, 2), left : left + span_c] = 1.0
        images[i, top : top + span_r, left + (c * span_c) // n_classes] = 0.6
    images = np.clip(images + rng.uniform(0, 0.15, size=images.shape) * (images > 0), 0, 1)
    return np.rint(images * 255).astype(np.uint8), labels.astype(np.uint8)


def write_synthetic_mnist(data_dir, n_train: int = 600, n_test: int = 200, seed: int = 0) -> Path:
    """Write a synthetic dataset under the standard MNIST file names."""
    data_dir = Path(data_dir)
    data_dir.mkdir(parents=True, exist_ok=True)
    for split, n, s in (("train", n_train, seed), ("test", n_test, seed + 1)):
        images, labels = synthetic_digits(n, s)
        image_name, label_name = MNIST_FILES[split]
        write_idx_images(data_dir / image_name, images)
        write_idx_labels(data_dir / label_name, labels)
    return data_dir


# ---------------------------------------------------------------------------
# CSV metrics

METRICS_COLUMNS = [
    "run_id",
    "seed",
    "activation",
    "optimizer",
    "lr",
    "epoch",
    "batch",
    "train_loss",
    "train_acc",
    "val_acc",
]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_csv_metrics(path, rows: Sequence[dict], columns: Sequence[str] = METRICS_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])


def read_csv_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# PGM images


def write_pgm(path, image: np.ndarray) -> None:
    """Binary (P5) graymap; ``image`` must be uint8 or integral values in [0, 255]."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("PGM image must be 2-d")
    if img.dtype != np.uint8:
        if np.any(img < 0) or np.any(img > 255):
            raise ValueError("pixel values must lie in [0, 255]")
        img = img.astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos].decode("ascii"))
    if fields[0] != "P5":
        raise DataFormatError(path, 0, f"not a P5 graymap: {fields[0]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval > 255:
        raise DataFormatError(path, pos, "16-bit PGM is not supported")
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w)


# ---------------------------------------------------------------------------
# Network checkpoints
#
# Little-endian throughout:
#   4 bytes   magic b"SHPG"
#   u32       format version (1)
#   u32       layer count
#   per layer:
#     u32     fan_in
#     u32     fan_out
#     u8      activation tag (0 identity, 1 relu, 2 sa, 3 shaplu, 4 softmax)
#     f64     weights, fan_out * fan_in values, row-major [fan_out, fan_in]
#     f64     bias, fan_out values

CHECKPOINT_MAGIC = b"SHPG"
CHECKPOINT_VERSION = 1
ACTIVATION_TAGS = {
    Activation.IDENTITY: 0,
    Activation.RELU: 1,
    Activation.SA: 2,
    Activation.SHAPLU: 3,
    Activation.SOFTMAX: 4,
}
_TAG_TO_ACTIVATION = {v: k for k, v in ACTIVATION_TAGS.items()}


def save_checkpoint(path, net: Network) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.fan_in, layer.fan_out, ACTIVATION_TAGS[layer.activation]))
        parts.append(np.ascontiguousarray(layer.weights, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(layer.bias, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, include_correction: Optional[bool] = None) -> Network:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError(path, 0, f"bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 12:
        raise DataFormatError(path, len(raw), "truncated checkpoint header")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(path, 4, f"unsupported checkpoint version {version}")
    pos = 12
    layers = []
    for _ in range(count):
        if len(raw) < pos + 9:
            raise DataFormatError(path, pos, "truncated layer header")
        fan_in, fan_out, tag = struct.unpack_from("<IIB", raw, pos)
        pos += 9
        if tag not in _TAG_TO_ACTIVATION:
            raise DataFormatError(path, pos - 1, f"unknown activation tag {tag}")
        n_w, n_b = fan_in * fan_out, fan_out
        if len(raw) < pos + 8 * (n_w + n_b):
            raise DataFormatError(path, pos, "truncated layer payload")
        w = np.frombuffer(raw, dtype="<f8", count=n_w, offset=pos).reshape(fan_out, fan_in)
        pos += 8 * n_w
        b = np.frombuffer(raw, dtype="<f8", count=n_b, offset=pos)
        pos += 8 * n_b
        layers.append(
            DenseLayer(w.astype(float), b.astype(float), _TAG_TO_ACTIVATION[tag], bool(include_correction))
        )
    if pos != len(raw):
        raise DataFormatError(path, pos, f"{len(raw) - pos} trailing bytes")
    return Network(layers)
