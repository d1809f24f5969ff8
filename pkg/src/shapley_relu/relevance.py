"""Shapley-flavoured layer-wise relevance propagation and heatmaps.

Relevance at a neuron output ``y_j`` is split over its inputs in proportion to
``w_jk x_k + b_j / n``, i.e. the approximate Shapley values with the common
gate factor cancelled. Because the gate cancels, the same rule serves
identity, ReLU, SA and ShapLU layers. Output layers are initialised either
with the closed-form approximation (linear / linear+ReLU heads) or with
permutation-sampled Shapley values of the softmax probability.

The rule treats a layer's inputs as independent players, which hidden
activations are not; the propagated values are an approximation to the
input Shapley values of the whole network. :func:`input_shapley_mc` gives the
real thing for toy networks so the gap can be measured.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .data_io import write_pgm
from .nn import Activation, DenseLayer, Network, softmax
from .shapley_core import (
    Method,
    NeuronView,
    ShapleyResult,
    approx_shapley,
    enumerate_shapley,
    sample_permutation_shapley,
)

DEFAULT_EPSILON = 1e-6
X_FLOOR = 1e-8

_PROPAGATABLE = (Activation.IDENTITY, Activation.RELU, Activation.SA, Activation.SHAPLU)


@dataclass
class RelevanceMap:
    """Relevance per layer: index 0 is the network input, the last entry is
    where propagation started. Entries are ``[batch, width]`` arrays."""

    per_layer: List[np.ndarray]
    epsilon: float

    @property
    def input(self) -> np.ndarray:
        return self.per_layer[0]

    def sums(self) -> np.ndarray:
        """Total relevance per layer, shape ``[n_layers, batch]``."""
        return np.stack([r.sum(axis=-1) for r in self.per_layer])


@dataclass
class HeatmapPair:
    positive: np.ndarray
    negative: np.ndarray
    class_id: int
    n_images: int
    counts: Optional[np.ndarray] = field(default=None, repr=False)


def _sign(v):
    return np.where(v >= 0, 1.0, -1.0)


def lrp_layer(layer: DenseLayer, inputs, out_relevance, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Redistribute ``out_relevance`` over the layer inputs.

    ``r(x_k) = sum_j (w_jk x_k + b_j/n) / (s_j + eps * sign(s_j)) * r(y_j)``
    with ``sign(0) = +1``. Works on a single sample or a batch. Where the
    denominator is exactly zero (only possible with ``epsilon = 0``) the
    neuron passes no relevance.
    """
    if layer.activation not in _PROPAGATABLE:
        raise ValueError(f"cannot propagate relevance through a {layer.activation.value} layer")
    x = np.asarray(inputs, dtype=float)
    r = np.asarray(out_relevance, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    r = np.atleast_2d(r)
    s = x @ layer.weights.T + layer.bias
    den = s + epsilon * _sign(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(den != 0, r / np.where(den != 0, den, 1.0), 0.0)
    # sum_j (w_jk x_k + b_j / n) q_j = x_k (q W)_k + (q . b) / n
    out = x * (q @ layer.weights) + (q @ layer.bias)[:, None] / layer.fan_in
    return out[0] if single else out


def lrp_network(net: Network, inputs, out_relevance, epsilon: float = DEFAULT_EPSILON) -> RelevanceMap:
    """Propagate relevance from the top of ``net`` to its input.

    ``out_relevance`` either matches the output width (non-softmax nets) or
    the input width of a softmax head, in which case propagation starts
    below the head.
    """
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    r = np.atleast_2d(np.asarray(out_relevance, dtype=float))
    net.forward(x)
    last = net.layers[-1]
    if last.activation is not Activation.SOFTMAX and r.shape[1] == last.fan_out:
        top = len(net.layers)
    elif r.shape[1] == last.fan_in:
        top = len(net.layers) - 1
    else:
        raise ValueError(
            f"relevance width {r.shape[1]} matches neither the output ({last.fan_out}) "
            f"nor the head input ({last.fan_in})"
        )
    per_layer = [r]
    for layer in reversed(net.layers[:top]):
        r = lrp_layer(layer, layer.inputs, r, epsilon)
        per_layer.append(r)
    return RelevanceMap(per_layer[::-1], epsilon)


def _head_inputs(net: Network, x) -> np.ndarray:
    net.forward(np.atleast_2d(np.asarray(x, dtype=float)))
    return net.layers[-1].inputs[0]


def init_relevance_softmax_mc(net: Network, x, class_id: int, paths: int = 1000, seed: int = 0) -> ShapleyResult:
    """Monte-Carlo Shapley values of the last hidden activations for one class probability.

    Players are the inputs of the softmax head; an absent player is set to
    0. ``baseline`` is the probability with every player absent.
    """
    head = net.layers[-1]
    if head.activation is not Activation.SOFTMAX:
        raise ValueError("final layer must be a softmax head")
    h = _head_inputs(net, x)
    terms = h[:, None] * head.weights.T  # [n, out]

    def prefix_values(perms):
        logits = np.empty((perms.shape[0], perms.shape[1] + 1, head.fan_out))
        logits[:, 0] = head.bias
        np.cumsum(terms[perms], axis=1, out=logits[:, 1:])
        logits[:, 1:] += head.bias
        return softmax(logits)[..., class_id]

    alpha, stderr = sample_permutation_shapley(
        prefix_values, head.fan_in, paths, np.random.default_rng(seed), chunk=2048
    )
    baseline = float(softmax(head.bias)[class_id])
    return ShapleyResult(alpha, Method.MONTE_CARLO, baseline=baseline, stderr=stderr)


def init_relevance_softmax_exact(net: Network, x, class_id: int) -> ShapleyResult:
    """Exact counterpart of :func:`init_relevance_softmax_mc` for small heads."""
    head = net.layers[-1]
    if head.activation is not Activation.SOFTMAX:
        raise ValueError("final layer must be a softmax head")
    h = _head_inputs(net, x)

    def value(masks):
        return softmax((masks * h) @ head.weights.T + head.bias)[:, class_id]

    alpha = enumerate_shapley(value, head.fan_in)
    return ShapleyResult(alpha, Method.EXACT, baseline=float(softmax(head.bias)[class_id]))


def init_relevance_linear_relu(net: Network, x, class_id: int) -> np.ndarray:
    """Approximate Shapley values of the last hidden activations for output neuron ``class_id``."""
    head = net.layers[-1]
    if head.activation not in _PROPAGATABLE:
        raise ValueError("closed-form initialisation needs a linear or linear+ReLU head")
    h = _head_inputs(net, x)
    nv = NeuronView.from_weights(head.weights[class_id], h, head.bias[class_id])
    return approx_shapley(nv).alpha


def shapley_input_relevance(
    net: Network,
    images,
    class_id: int,
    paths: int = 1000,
    seed: int = 0,
    epsilon: float = DEFAULT_EPSILON,
) -> np.ndarray:
    """MC-initialised LRP relevance of every input pixel, ``[n_images, n_inputs]``.

    Image ``i`` uses the independent stream ``SeedSequence([seed, i])``.
    """
    x = np.atleast_2d(np.asarray(images, dtype=float))
    init = np.empty((x.shape[0], net.layers[-1].fan_in))
    for i in range(x.shape[0]):
        stream = int(np.random.SeedSequence([seed, i]).generate_state(1, np.uint64)[0])
        init[i] = init_relevance_softmax_mc(net, x[i], class_id, paths, stream).alpha
    return lrp_network(net, x, init, epsilon).input


def input_shapley_mc(net: Network, x, class_id: int, paths: int = 1000, seed: int = 0) -> ShapleyResult:
    """Whole-network Shapley values of the inputs of a toy net (slow path).

    Value of a coalition is the network output ``class_id`` with absent
    inputs set to 0. Meant for nets with at most a dozen inputs.
    """
    x = np.asarray(x, dtype=float).ravel()
    n = x.size
    if n > 12:
        raise ValueError("whole-network Monte Carlo is limited to 12 inputs")

    def prefix_values(perms):
        m = perms.shape[0]
        masks = np.zeros((m, n + 1, n), dtype=bool)
        rows = np.arange(m)[:, None]
        for i in range(1, n + 1):
            masks[:, i] = masks[:, i - 1]
            masks[rows[:, 0], i, perms[:, i - 1]] = True
        out = net.forward((masks * x).reshape(-1, n))[:, class_id]
        return out.reshape(m, n + 1)

    alpha, stderr = sample_permutation_shapley(prefix_values, n, paths, np.random.default_rng(seed), chunk=1024)
    baseline = float(net.forward(np.zeros((1, n)))[0, class_id])
    return ShapleyResult(alpha, Method.MONTE_CARLO, baseline=baseline, stderr=stderr)


def input_shapley_exact(net: Network, x, class_id: int) -> ShapleyResult:
    x = np.asarray(x, dtype=float).ravel()
    alpha = enumerate_shapley(lambda masks: net.forward(masks * x)[:, class_id], x.size)
    baseline = float(net.forward(np.zeros((1, x.size)))[0, class_id])
    return ShapleyResult(alpha, Method.EXACT, baseline=baseline)


# ---------------------------------------------------------------------------
# Heatmaps


def _image_shape(n: int, shape):
    if shape is not None:
        return tuple(shape)
    side = int(round(n**0.5))
    return (side, side) if side * side == n else (1, n)


def aggregate_heatmaps(
    relevance_maps: Sequence,
    inputs: Sequence,
    class_id: int,
    x_floor: float = X_FLOOR,
    shape=None,
    average: str = "images",
) -> HeatmapPair:
    """Pixelwise means of ``max(a/x, 0)`` and ``-min(a/x, 0)``.

    ``relevance_maps`` holds input-level relevance vectors (or
    :class:`RelevanceMap` objects). Pixels with ``|x| < x_floor`` add nothing.
    ``average="images"`` divides by the number of images; ``"counted"``
    divides each pixel by the number of images in which it was not skipped
    (rarely lit pixels then weigh as much as common ones). A pixel never
    counted stays 0 either way.
    """
    if average not in ("images", "counted"):
        raise ValueError(f"average must be 'images' or 'counted', got {average!r}")
    if len(relevance_maps) == 0:
        raise ValueError("no relevance maps to aggregate")
    if len(relevance_maps) != len(inputs):
        raise ValueError("relevance maps and inputs differ in length")
    alpha = np.stack(
        [np.ravel(m.input if isinstance(m, RelevanceMap) else m) for m in relevance_maps]
    ).astype(float)
    x = np.stack([np.ravel(np.asarray(i, dtype=float)) for i in inputs])
    if alpha.shape != x.shape:
        raise ValueError(f"relevance shape {alpha.shape} does not match inputs {x.shape}")
    keep = np.abs(x) >= x_floor
    ratio = np.divide(alpha, x, out=np.zeros_like(alpha), where=keep)
    counts = keep.sum(axis=0)
    denom = np.maximum(counts, 1) if average == "counted" else len(x)
    pos = np.where(keep, np.maximum(ratio, 0.0), 0.0).sum(axis=0) / denom
    neg = np.where(keep, -np.minimum(ratio, 0.0), 0.0).sum(axis=0) / denom
    img = _image_shape(x.shape[1], shape)
    return HeatmapPair(pos.reshape(img), neg.reshape(img), class_id, len(relevance_maps), counts.reshape(img))


def input_gradients(net: Network, inputs, class_id: int) -> np.ndarray:
    """``d output[class_id] / d input`` via ``backward``, one row per image."""
    x = np.atleast_2d(np.asarray(inputs, dtype=float))
    out = net.forward(x)
    seed_grad = np.zeros_like(out)
    seed_grad[:, class_id] = 1.0
    return net.backward(seed_grad)


def sensitivity_heatmaps(net: Network, inputs, class_id: int, shape=None) -> HeatmapPair:
    g = input_gradients(net, inputs, class_id)
    img = _image_shape(g.shape[1], shape)
    pos = np.maximum(g, 0.0).mean(axis=0).reshape(img)
    neg = (-np.minimum(g, 0.0)).mean(axis=0).reshape(img)
    return HeatmapPair(pos, neg, class_id, g.shape[0])


def heatmap_to_gray(pair: HeatmapPair):
    """8-bit images scaled by the maximum over both halves of the pair."""
    top = max(pair.positive.max(), pair.negative.max())
    if top <= 0:
        return np.zeros(pair.positive.shape, np.uint8), np.zeros(pair.negative.shape, np.uint8)
    scale = 255.0 / top
    return (
        np.rint(pair.positive * scale).astype(np.uint8),
        np.rint(pair.negative * scale).astype(np.uint8),
    )


def write_heatmaps(out_dir, pair: HeatmapPair, prefix: str = "heatmap") -> List[Path]:
    """Write ``<prefix>_<class>_{pos,neg}.pgm`` plus raw ``.csv`` values."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    gray = heatmap_to_gray(pair)
    for tag, raw, img in (("pos", pair.positive, gray[0]), ("neg", pair.negative, gray[1])):
        stem = out_dir / f"{prefix}_{pair.class_id}_{tag}"
        write_pgm(stem.with_suffix(".pgm"), img)
        with open(stem.with_suffix(".csv"), "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row in raw:
                writer.writerow([repr(float(v)) for v in row])
        written += [stem.with_suffix(".pgm"), stem.with_suffix(".csv")]
    return written
