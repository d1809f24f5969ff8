"""Shapley values of a single ReLU neuron.

A neuron ``y = max(sum_i w_i x_i + b, 0)`` is treated as a cooperative game
whose players are the weighted inputs ``p_i = w_i x_i``. This module provides

* exact Shapley values by enumeration (small ``n``),
* permutation-sampling Monte-Carlo estimates,
* the closed-form Gaussian approximation
  ``alpha_k ~ Phi((mu + b) / sigma) * (p_k + b / n)`` with
  ``mu = sum(p) / 2`` and ``sigma^2 = sum(p^2) / 6 + sum(p)^2 / 12``,
* the Shapley Activation (the sum of the approximate alphas) and its exact
  gradient, and the per-input "Shapley gradient" used by ShapLU training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .special import norm_cdf, norm_pdf

SIGMA_FLOOR = 1e-12
N_MAX_EXACT = 10


class BiasMode(str, Enum):
    """How the bias enters the coalition value function.

    ANCHORED: ``v(S) = relu(sum_S p + b)``; the empty coalition is worth
    ``relu(b)``, which is reported as the baseline and not distributed.
    SHARED: ``v(S) = relu(sum_S p + |S|/n * b)``; baseline 0.
    """

    ANCHORED = "anchored"
    SHARED = "shared"


class Method(str, Enum):
    EXACT = "exact"
    MONTE_CARLO = "monte_carlo"
    APPROX = "approx"


@dataclass(frozen=True)
class NeuronView:
    """The weighted inputs ``w_i * x_i`` and bias of one neuron evaluation."""

    products: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        p = np.atleast_1d(np.asarray(self.products, dtype=float)).copy()
        if p.ndim != 1 or p.size == 0:
            raise ValueError("products must be a non-empty 1-d vector")
        if not np.all(np.isfinite(p)):
            raise ValueError("products must be finite")
        b = float(self.bias)
        if not math.isfinite(b):
            raise ValueError("bias must be finite")
        p.setflags(write=False)
        object.__setattr__(self, "products", p)
        object.__setattr__(self, "bias", b)

    @classmethod
    def from_weights(cls, weights, inputs, bias=0.0) -> "NeuronView":
        w = np.asarray(weights, dtype=float)
        x = np.asarray(inputs, dtype=float)
        if w.shape != x.shape:
            raise ValueError(f"weights {w.shape} and inputs {x.shape} differ in shape")
        return cls(w * x, bias)

    @property
    def n(self) -> int:
        return self.products.size

    @property
    def preactivation(self) -> float:
        return float(self.products.sum() + self.bias)


@dataclass(frozen=True)
class ApproxStats:
    mu: float
    sigma: float
    phi_gate: float

    @property
    def degenerate(self) -> bool:
        return self.sigma <= SIGMA_FLOOR


@dataclass(frozen=True)
class ShapleyResult:
    alpha: np.ndarray
    method: Method
    baseline: float = 0.0
    stderr: Optional[np.ndarray] = None

    @property
    def total(self) -> float:
        return float(self.alpha.sum())


@dataclass(frozen=True)
class ShapGradient:
    d_x: np.ndarray
    d_w: np.ndarray
    d_b: float
    include_correction: bool


def relu(s):
    return np.maximum(s, 0.0)


# ---------------------------------------------------------------------------
# Gate statistics, shared with the vectorised layer code in ``nn``.


def gate_terms(sum_p, sum_p2, bias):
    """Elementwise ``mu, sigma, t, gate, degenerate`` from sufficient statistics.

    ``sum_p`` and ``sum_p2`` are the sums of the products and of their
    squares over one neuron's inputs; all three arguments broadcast. For
    degenerate neurons (``sigma <= SIGMA_FLOOR``) the gate is the step function
    of ``mu + b`` (0.5 at exactly 0) and ``t`` is set to 0.
    """
    sum_p = np.asarray(sum_p, dtype=float)
    mu = 0.5 * sum_p
    sigma = np.sqrt(np.asarray(sum_p2, dtype=float) / 6.0 + sum_p * sum_p / 12.0)
    centre = mu + bias
    degenerate = sigma <= SIGMA_FLOOR
    safe_sigma = np.where(degenerate, 1.0, sigma)
    t = np.where(degenerate, 0.0, centre / safe_sigma)
    step = np.where(centre > 0, 1.0, np.where(centre < 0, 0.0, 0.5))
    gate = np.where(degenerate, step, norm_cdf(t))
    return mu, sigma, t, gate, degenerate


def approx_stats(nv: NeuronView) -> ApproxStats:
    p = nv.products
    mu, sigma, _, gate, _ = gate_terms(p.sum(), np.dot(p, p), nv.bias)
    return ApproxStats(float(mu), float(sigma), float(gate))


# ---------------------------------------------------------------------------
# Exact and Monte-Carlo Shapley values for an arbitrary game.


def _subset_masks(n: int) -> np.ndarray:
    codes = np.arange(1 << n)
    return ((codes[:, None] >> np.arange(n)) & 1).astype(bool)


def enumerate_shapley(value: Callable[[np.ndarray], np.ndarray], n: int) -> np.ndarray:
    """Exact Shapley values of an ``n``-player game.

    ``value`` maps a boolean coalition matrix ``[m, n]`` to ``m`` coalition
    values. Uses the subset form of the permutation average:
    ``alpha_k = sum_S |S|! (n-|S|-1)! / n! * (v(S + k) - v(S))``.
    """
    if n < 1:
        raise ValueError("need at least one player")
    if n > N_MAX_EXACT:
        raise ValueError(f"exact enumeration limited to n <= {N_MAX_EXACT}, got {n}")
    masks = _subset_masks(n)
    v = np.asarray(value(masks), dtype=float)
    size = masks.sum(axis=1)
    fact = np.array([math.factorial(i) for i in range(n + 1)], dtype=float)
    codes = np.arange(1 << n)
    alpha = np.empty(n)
    for k in range(n):
        without = ~masks[:, k]
        s = size[without]
        weight = fact[s] * fact[n - s - 1] / fact[n]
        gain = v[codes[without] | (1 << k)] - v[codes[without]]
        alpha[k] = np.dot(weight, gain)
    return alpha


def sample_permutation_shapley(
    prefix_values: Callable[[np.ndarray], np.ndarray],
    n: int,
    paths: int,
    rng: np.random.Generator,
    chunk: int = 4096,
):
    """Permutation-sampling Shapley estimate.

    ``prefix_values(perms)`` receives an integer array ``[m, n]`` of player
    orders and returns ``[m, n + 1]`` coalition values, column ``i`` being the
    value of the first ``i`` players of each order. Returns the sample mean of
    each player's marginal contribution and its standard error.
    """
    if paths < 2:
        raise ValueError("paths must be >= 2")
    count = 0
    mean = np.zeros(n)
    m2 = np.zeros(n)
    base = np.arange(n)
    done = 0
    while done < paths:
        m = min(chunk, paths - done)
        perms = rng.permuted(np.tile(base, (m, 1)), axis=1)
        values = np.asarray(prefix_values(perms), dtype=float)
        gains = np.diff(values, axis=1)
        contrib = np.empty_like(gains)
        np.put_along_axis(contrib, perms, gains, axis=1)
        # Chan et al. pairwise combination of running moments
        c_mean = contrib.mean(axis=0)
        c_m2 = ((contrib - c_mean) ** 2).sum(axis=0)
        total = count + m
        delta = c_mean - mean
        mean = mean + delta * m / total
        m2 = m2 + c_m2 + delta**2 * count * m / total
        count = total
        done += m
    stderr = np.sqrt(m2 / (count - 1)) / math.sqrt(count)
    return mean, stderr


def _bias_schedule(nv: NeuronView, mode: BiasMode) -> np.ndarray:
    sizes = np.arange(nv.n + 1)
    if BiasMode(mode) is BiasMode.ANCHORED:
        return np.full(nv.n + 1, nv.bias)
    return sizes / nv.n * nv.bias


def exact_shapley(nv: NeuronView, bias_mode: BiasMode = BiasMode.ANCHORED) -> ShapleyResult:
    mode = BiasMode(bias_mode)
    if nv.n > N_MAX_EXACT:
        raise ValueError(
            f"exact Shapley needs n <= {N_MAX_EXACT} (got {nv.n}); use mc_shapley"
        )
    schedule = _bias_schedule(nv, mode)

    def value(masks):
        return relu(masks @ nv.products + schedule[masks.sum(axis=1)])

    alpha = enumerate_shapley(value, nv.n)
    return ShapleyResult(alpha, Method.EXACT, baseline=float(relu(schedule[0])))


def mc_shapley(
    nv: NeuronView,
    bias_mode: BiasMode = BiasMode.ANCHORED,
    paths: int = 1000,
    seed: int = 0,
) -> ShapleyResult:
    schedule = _bias_schedule(nv, BiasMode(bias_mode))

    def prefix_values(perms):
        partial = np.zeros((perms.shape[0], nv.n + 1))
        np.cumsum(nv.products[perms], axis=1, out=partial[:, 1:])
        return relu(partial + schedule)

    rng = np.random.default_rng(seed)
    alpha, stderr = sample_permutation_shapley(prefix_values, nv.n, paths, rng)
    return ShapleyResult(alpha, Method.MONTE_CARLO, baseline=float(relu(schedule[0])), stderr=stderr)


# ---------------------------------------------------------------------------
# Analytical approximation, Shapley Activation and gradients.


def approx_shapley(nv: NeuronView) -> ShapleyResult:
    gate = approx_stats(nv).phi_gate
    alpha = gate * (nv.products + nv.bias / nv.n)
    return ShapleyResult(alpha, Method.APPROX)


def sa_value(nv: NeuronView) -> float:
    """Shapley Activation: ``Phi((mu + b) / sigma) * (sum(p) + b)``."""
    return approx_stats(nv).phi_gate * nv.preactivation


def _check_factorisation(nv, weights, inputs):
    w = np.asarray(weights, dtype=float)
    x = np.asarray(inputs, dtype=float)
    if w.shape != nv.products.shape or x.shape != nv.products.shape:
        raise ValueError("weights and inputs must match the neuron's products in shape")
    if not np.allclose(w * x, nv.products, rtol=1e-12, atol=1e-12):
        raise ValueError("products must equal weights * inputs")
    return w, x


def sa_gradient(nv: NeuronView, weights, inputs) -> ShapGradient:
    """Exact gradient of :func:`sa_value` with respect to x, w and b."""
    w, x = _check_factorisation(nv, weights, inputs)
    p = nv.products
    mu, sigma, t, gate, degenerate = gate_terms(p.sum(), np.dot(p, p), nv.bias)
    if degenerate:
        return ShapGradient(gate * w, gate * x, float(gate), include_correction=True)
    s = nv.preactivation
    dens = norm_pdf(t)
    centre = mu + nv.bias
    dt_dp = 0.5 / sigma - centre * (p + mu) / (6.0 * sigma**3)
    dy_dp = gate + dens * s * dt_dp
    d_b = gate + dens * s / sigma
    return ShapGradient(dy_dp * w, dy_dp * x, float(d_b), include_correction=True)


def shapley_gradient(nv: NeuronView, weights, inputs, include_correction: bool = True) -> ShapGradient:
    """Per-input Shapley gradients ``d alpha_k / d x_k`` etc. (ShapLU backward).

    With ``include_correction=False`` the terms coming from the derivative of
    the gate itself are dropped from ``d_x`` and ``d_w``; ``d_b`` is the same
    either way.
    """
    w, x = _check_factorisation(nv, weights, inputs)
    p = nv.products
    mu, sigma, t, gate, degenerate = gate_terms(p.sum(), np.dot(p, p), nv.bias)
    if degenerate:
        return ShapGradient(gate * w, gate * x, float(gate), include_correction)
    dens = norm_pdf(t)
    g = dens * (p + nv.bias / nv.n)
    d_b = gate + g.sum() / sigma
    d_alpha = np.full(nv.n, float(gate))
    if include_correction:
        centre = mu + nv.bias
        d_alpha = d_alpha + g * (0.5 / sigma - centre * (p + mu) / (6.0 * sigma**3))
    return ShapGradient(d_alpha * w, d_alpha * x, float(d_b), include_correction)


def gate_profile(nv: NeuronView, k: int, values) -> np.ndarray:
    """Gate ``Phi((mu + b) / sigma)`` with product ``k`` swept over ``values``."""
    if not 0 <= k < nv.n:
        raise IndexError(f"input index {k} out of range for n={nv.n}")
    v = np.asarray(values, dtype=float)
    others = np.delete(nv.products, k)
    sum_p = others.sum() + v
    sum_p2 = np.dot(others, others) + v * v
    return gate_terms(sum_p, sum_p2, nv.bias)[3]
